from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from face_dualdict.config import TrainConfig
from face_dualdict.degrade import degrade_image
from face_dualdict.dictionary import init_generic
from face_dualdict.errors import ShapeMismatchError, UnknownVariantError
from face_dualdict.evalkit import (
    PSNR_CAP,
    EvalReport,
    IdentityEmbedder,
    evaluate,
    face_crop,
    identity_cosine,
    load_embedder,
    load_report,
    psnr,
    report_table,
    save_embedder,
    save_report,
    ssim,
    train_identity_embedder,
    verify_report,
)
from face_dualdict.imagedata import load_aligned_image, load_landmarks, to_gray, to_tensor
from face_dualdict.network import FaceRestorationModel
from face_dualdict.storage import load_records_jsonl, save_records_jsonl
from face_dualdict.training import TrainedModel
from face_dualdict.utils_seed import derive_seed


@pytest.fixture
def toy_image(toy_root):
    return load_aligned_image(sorted(toy_root.glob("*/*.png"))[0], 64)


# -----------------------------
# PSNR / SSIM
# -----------------------------
def test_psnr_cases():
    gt = np.full((8, 8, 3), 0.2)
    assert psnr(gt, gt) == PSNR_CAP
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.full((8, 8, 3), 0.5), np.zeros((8, 8, 3))) == pytest.approx(10 * math.log10(4), abs=1e-9)
    with pytest.raises(ShapeMismatchError):
        psnr(gt, gt[:4])


def test_ssim_cases(toy_image):
    assert ssim(toy_image, toy_image) == pytest.approx(1.0, abs=1e-12)
    other = np.clip(toy_image + 0.05 * np.random.default_rng(0).standard_normal(toy_image.shape), 0, 1)
    assert ssim(toy_image, other) == ssim(other, toy_image)
    assert ssim(1.0 - toy_image, toy_image) < 0.5


def test_metrics_agree_with_skimage():
    rng = np.random.default_rng(3)
    for _ in range(20):
        gt = rng.random((32, 32, 3))
        pred = np.clip(gt + 0.1 * rng.standard_normal(gt.shape), 0, 1)
        expected = structural_similarity(
            to_gray(pred), to_gray(gt), data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(pred, gt) == pytest.approx(expected, abs=1e-4)
        assert psnr(pred, gt) == pytest.approx(peak_signal_noise_ratio(gt, pred, data_range=1.0), abs=1e-6)


# -----------------------------
# 身份相似度
# -----------------------------
def test_identity_cosine_of_same_image(toy_image):
    emb = IdentityEmbedder(5)
    assert identity_cosine(toy_image, toy_image, emb) == pytest.approx(1.0, abs=1e-5)
    assert face_crop(toy_image).shape == (52, 52, 3)


def test_embedder_roundtrip(tmp_path, toy_image):
    emb = IdentityEmbedder(7)
    save_embedder(emb, tmp_path / "e.pt")
    back = load_embedder(tmp_path / "e.pt")
    x = to_tensor(face_crop(toy_image))[None]
    with torch.no_grad():
        assert torch.equal(emb.eval().embed(x), back.embed(x))


@pytest.mark.slow
def test_trained_embedder_separates_identities(toy_manifests):
    manifest = toy_manifests["train"]
    emb = train_identity_embedder(manifest, 64, epochs=40, seed=0, batch_size=8)
    a, b = manifest.identities[0], manifest.identities[1]
    same = identity_cosine(load_aligned_image(a.image_paths[0], 64), load_aligned_image(a.image_paths[1], 64), emb)
    diff = identity_cosine(load_aligned_image(a.image_paths[0], 64), load_aligned_image(b.image_paths[0], 64), emb)
    assert same > diff


# -----------------------------
# 报告
# -----------------------------
def _report():
    records = [
        {"path": f"p{i}.png", "variant": v, "psnr_db": 20.0 + i, "ssim": 0.5, "id_cosine": None}
        for i in range(3) for v in ("input", "full")
    ]
    return EvalReport(task="x4", seed=0, variants=("input", "full"), records=records)


def test_report_aggregates_and_checksum(tmp_path):
    report = _report()
    aggs = report.aggregates()
    assert aggs["full"]["count"] == 3
    assert aggs["full"]["psnr_db"] == pytest.approx(21.0)
    assert aggs["input"]["id_cosine"] is None
    save_report(report, tmp_path / "r.jsonl")
    assert verify_report(tmp_path / "r.jsonl")
    back = load_report(tmp_path / "r.jsonl")
    assert back.aggregates() == aggs
    assert report_table(report).row_count == 2


def test_tampered_report_fails_verification(tmp_path):
    path = tmp_path / "r.jsonl"
    save_report(_report(), path)
    rows = load_records_jsonl(path)
    next(r for r in rows if r.get("type") == "record")["psnr_db"] = 99.0
    save_records_jsonl(rows, path)
    assert not verify_report(path)


def test_evaluate_is_deterministic(tiny_restorer, toy_manifests):
    model = FaceRestorationModel(tiny_restorer)
    idents = toy_manifests["train"].identities[:4]
    imgs = torch.stack([to_tensor(load_aligned_image(i.image_paths[0], 64)) for i in idents])
    with torch.no_grad():
        generic = init_generic(
            model.generic_extractor, imgs, [load_landmarks(i.landmark_paths[0]) for i in idents],
            [i.identity_id for i in idents],
        ).snapshot()
    trained = TrainedModel(TrainConfig(restorer=tiny_restorer), model, generic, {})
    manifest = toy_manifests["test"]
    a = evaluate(trained, manifest, "x4", seed=3)
    b = evaluate(trained, manifest, "x4", seed=3)
    assert len(a.records) == manifest.num_images * 3
    assert json.dumps(a.to_rows()) == json.dumps(b.to_rows())

    first = manifest.identities[0].image_paths[0]
    gt = load_aligned_image(first, 64)
    lq, _ = degrade_image(gt, derive_seed(3, 0), "x4", 64)
    rec = next(r for r in a.records if r["path"] == first and r["variant"] == "input")
    assert rec["psnr_db"] == pytest.approx(psnr(lq, gt))
    assert all(-1.0 <= r["ssim"] <= 1.0 + 1e-9 for r in a.records)


def test_evaluate_rejects_unknown_variant(tiny_restorer, toy_manifests):
    trained = TrainedModel(TrainConfig(restorer=tiny_restorer), FaceRestorationModel(tiny_restorer), None, {})
    with pytest.raises(UnknownVariantError):
        evaluate(trained, toy_manifests["test"], "x4", variants=("input", "bicubic"))
