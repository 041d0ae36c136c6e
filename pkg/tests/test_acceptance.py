"""
玩具规模的完整训练实验（耗时数小时，默认不运行：pytest -m slow）
"""
from __future__ import annotations

import pytest

from face_dualdict.config import RestorerConfig, TrainConfig
from face_dualdict.evalkit import evaluate, train_identity_embedder
from face_dualdict.imagedata import build_reference_manifest
from face_dualdict.storage import load_records_jsonl
from face_dualdict.toy_faces import make_toy_corpus
from face_dualdict.training import load_trained, train

EPOCHS = 30


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    make_toy_corpus(base / "toy", identities=80, images_per_id=4, size=64, seed=0)
    manifests = build_reference_manifest(base / "toy", 0.0, (60, 10, 10), seed=0)
    cfg = TrainConfig(
        max_epochs=EPOCHS,
        max_stage_epochs=10,
        checkpoint_dir=str(base / "ckpt"),
        log_path=str(base / "ckpt" / "train_log.jsonl"),
        restorer=RestorerConfig(input_size=64, num_scales=3, dict_size=16),
    )
    last = train(cfg, manifests, max_epochs=EPOCHS)
    trained = load_trained(last)
    embedder = train_identity_embedder(manifests["train"], 64, epochs=40, seed=0)
    reports = {
        task: evaluate(trained, manifests["test"], task, seed=0, embedder=embedder).aggregates()
        for task in ("x4", "x8")
    }
    return cfg, reports


@pytest.mark.slow
def test_validation_loss_halves(experiment):
    cfg, _ = experiment
    val = {r["epoch"]: r["value"] for r in load_records_jsonl(cfg.log_path) if r["term"] == "val_rec"}
    assert val[EPOCHS] < 0.5 * val[1]


@pytest.mark.slow
def test_restoration_beats_degraded_input(experiment):
    _, reports = experiment
    x4 = reports["x4"]
    assert x4["full"]["psnr_db"] >= x4["input"]["psnr_db"] + 1.0


@pytest.mark.slow
def test_specific_dictionary_helps_more_on_harder_task(experiment):
    _, reports = experiment
    gap = {t: r["full"]["psnr_db"] - r["generic_only"]["psnr_db"] for t, r in reports.items()}
    assert gap["x8"] >= 0.0
    assert gap["x8"] > gap["x4"]


@pytest.mark.slow
def test_specific_dictionary_preserves_identity(experiment):
    _, reports = experiment
    x8 = reports["x8"]
    assert x8["full"]["id_cosine"] >= x8["generic_only"]["id_cosine"]
