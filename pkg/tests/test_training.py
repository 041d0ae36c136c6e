from __future__ import annotations

import dataclasses
import itertools

import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from face_dualdict.checkpoint import checkpoint_name, load_checkpoint
from face_dualdict.config import LossWeights
from face_dualdict.degrade import degrade_image
from face_dualdict.dictionary import DictionaryStage
from face_dualdict.errors import DataError, DivergenceError, UnknownVariantError
from face_dualdict.imagedata import ReferenceManifest, load_aligned_image, load_landmarks
from face_dualdict.network import restore_image
from face_dualdict.storage import load_records_jsonl
from face_dualdict.training import (
    VARIANT_NAMES,
    FaceSampleDataset,
    Trainer,
    ablation_variants,
    collate_samples,
    load_trained,
    plateau_detector,
    select_dictionary_images,
    train,
)

LOSS_TERMS = ("mse", "perceptual", "style", "adv_g", "adv_d", "total")


@pytest.fixture
def small(toy_manifests):
    return {
        "train": ReferenceManifest("train", toy_manifests["train"].identities[:4]),
        "val": toy_manifests["val"],
    }


def _relocate(cfg, tmp_path, name):
    return dataclasses.replace(
        cfg, checkpoint_dir=str(tmp_path / name), log_path=str(tmp_path / name / "train_log.jsonl")
    )


# -----------------------------
# 平台期
# -----------------------------
def test_plateau_cases():
    assert not plateau_detector([1.0, 0.8, 0.6, 0.4, 0.2], patience=2, min_delta=0.01)
    assert plateau_detector([0.5, 0.5, 0.5], patience=2, min_delta=0.01)
    assert plateau_detector([1.0, 0.9, 0.899, 0.8985], patience=2, min_delta=0.01)
    assert plateau_detector([1.0, 0.9, 0.899, 0.8985], patience=2, min_delta=0.01, relative=False)
    assert not plateau_detector([1.0, 0.9, 0.899], patience=2, min_delta=0.01)
    assert not plateau_detector([], patience=1, min_delta=0.01)


# -----------------------------
# 消融变体
# -----------------------------
def test_ablation_variants_map_to_config(tiny_train):
    assert not ablation_variants("generic_only", tiny_train).restorer.use_specific
    assert not ablation_variants("specific_only", tiny_train).restorer.use_generic
    assert ablation_variants("no_transform", tiny_train).restorer.read_mode == "best_match"
    assert ablation_variants("OB", tiny_train).random_init_dictionary
    assert ablation_variants("wo_F", tiny_train).skip_stages == ("FORWARD",)
    assert ablation_variants("wo_B", tiny_train).skip_stages == ("BACKWARD",)
    assert ablation_variants("2T", tiny_train).restorer.transform_scales() == (8, 4)
    assert ablation_variants("Y32", tiny_train).restorer.dict_size == 32
    y0 = ablation_variants("Y0", tiny_train).restorer
    assert y0.dict_size == 0 and y0.channel_multiplier == 2 and not y0.dictionaries_enabled
    assert tiny_train.restorer.dict_size == 4
    assert "full" in VARIANT_NAMES and "Y128" in VARIANT_NAMES


def test_unknown_variant(tiny_train):
    with pytest.raises(UnknownVariantError):
        ablation_variants("Z9", tiny_train)


# -----------------------------
# 数据
# -----------------------------
def test_sample_refs_exclude_self(small, tiny_train):
    ds = FaceSampleDataset(small["train"], tiny_train, training=True)
    ds.set_epoch(1)
    for i in range(len(ds)):
        item = ds[i]
        assert len(item["refs"]) <= tiny_train.max_refs_per_sample
        own = load_aligned_image(item["path"], 64)
        assert item["hq"].shape == (3, 64, 64) and item["lq"].shape == (3, 64, 64)
        for ref, _ in item["refs"]:
            assert not np.array_equal(ref, own)


def test_samples_are_deterministic_per_epoch(small, tiny_train):
    ds = FaceSampleDataset(small["train"], tiny_train, training=True)
    ds.set_epoch(2)
    a, b = ds[3], ds[3]
    assert torch.equal(a["lq"], b["lq"]) and a["params"] == b["params"]
    val = FaceSampleDataset(small["val"], tiny_train, training=False)
    assert len(val[0]["refs"]) == 2
    batch = collate_samples([val[0], val[1]])
    assert batch["hq"].shape == (2, 3, 64, 64)
    assert len(batch["refs"]) == 2


def test_dictionary_images_need_distinct_identities(small):
    picked = select_dictionary_images(small["train"], 4, seed=0)
    assert len({p[0] for p in picked}) == 4
    with pytest.raises(DataError):
        select_dictionary_images(small["train"], 5, seed=0)


# -----------------------------
# 训练
# -----------------------------
def test_one_epoch_smoke(small, tiny_train):
    trainer = Trainer(tiny_train, small["train"], small["val"])
    path = trainer.fit(1)
    assert path.name == checkpoint_name(1)
    log = load_records_jsonl(tiny_train.log_path)
    terms = {r["term"] for r in log}
    assert set(LOSS_TERMS) <= terms and "val_rec" in terms
    assert all(np.isfinite(r["value"]) for r in log if r["term"] in LOSS_TERMS)
    header, payload = load_checkpoint(path)
    assert header["epoch"] == 1 and header["stage"] == "INIT"
    assert payload["generic_dictionary"] is not None


def test_stage_sequence_with_forced_advance(small, tiny_train):
    cfg = dataclasses.replace(tiny_train, max_stage_epochs=1)
    trainer = Trainer(cfg, small["train"], small["val"])
    trainer.fit(3)
    assert trainer.stage == DictionaryStage.FROZEN
    stages = [r["stage"] for r in load_records_jsonl(cfg.log_path) if r["term"] == "stage"]
    assert stages == ["FORWARD", "BACKWARD", "FROZEN"]


def _extractors_equal(model) -> bool:
    gen = model.generic_extractor.state_dict()
    spe = model.specific_extractor.state_dict()
    return gen.keys() == spe.keys() and all(torch.equal(gen[k], spe[k]) for k in gen)


def test_leaving_init_copies_generic_extractor(small, tiny_train):
    cfg = dataclasses.replace(tiny_train, max_stage_epochs=1)
    trainer = Trainer(cfg, small["train"], small["val"])
    trainer.fit(1)
    assert trainer.stage == DictionaryStage.FORWARD
    assert _extractors_equal(trainer.model)


def test_extractor_copy_resets_specific_optimizer_state(small, tiny_train):
    trainer = Trainer(tiny_train, small["train"], small["val"])
    trainer.train_set.set_epoch(1)
    loader = DataLoader(trainer.train_set, batch_size=2, shuffle=False, collate_fn=collate_samples)
    for batch in itertools.islice(loader, 2):
        trainer.train_step(batch)
    assert not _extractors_equal(trainer.model)
    trainer._enter_stage(DictionaryStage.FORWARD)
    assert _extractors_equal(trainer.model)
    spe = {id(p) for p in trainer.model.specific_extractor.parameters()}
    assert not any(id(p) in spe for p in trainer.opt_g.state)
    # 优化器仍然持有同一组参数
    group = next(g for g in trainer.opt_g.param_groups if g["name"] == "theta_spe")
    assert {id(p) for p in group["params"]} == spe


def test_skipping_forward_goes_straight_to_backward(small, tiny_train):
    cfg = dataclasses.replace(ablation_variants("wo_F", tiny_train), max_stage_epochs=1)
    trainer = Trainer(cfg, small["train"], small["val"])
    trainer.fit(1)
    assert trainer.stage == DictionaryStage.BACKWARD
    assert trainer.opt_dict is not None


def test_random_init_starts_in_backward(small, tiny_train):
    trainer = Trainer(ablation_variants("OB", tiny_train), small["train"], small["val"])
    assert trainer.stage == DictionaryStage.BACKWARD
    assert trainer.dict_sources == []
    assert trainer.model.memory.bank.entries_per_dict == 4


def test_frozen_dictionary_survives_100_steps(small, tiny_train):
    trainer = Trainer(tiny_train, small["train"], small["val"])
    for stage in (DictionaryStage.FORWARD, DictionaryStage.BACKWARD, DictionaryStage.FROZEN):
        trainer._enter_stage(stage)
    before = trainer.model.memory.bank.content_hash()
    trainer.train_set.set_epoch(1)
    loader = DataLoader(trainer.train_set, batch_size=2, shuffle=False, collate_fn=collate_samples)
    for batch in itertools.islice(itertools.cycle(loader), 100):
        trainer.train_step(batch)
    assert trainer.model.memory.bank.content_hash() == before


def test_learning_rate_decay(small, tiny_train):
    trainer = Trainer(tiny_train, small["train"], small["val"])
    trainer.decay_learning_rate()
    assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(tiny_train.lr_theta / 2)
    assert trainer.opt_d.param_groups[0]["lr"] == pytest.approx(tiny_train.lr_theta / 2)


def test_non_finite_loss_raises_divergence(small, tiny_train):
    cfg = dataclasses.replace(tiny_train, weights=LossWeights(lambda_mse=float("nan")))
    trainer = Trainer(cfg, small["train"], small["val"])
    with pytest.raises(DivergenceError) as info:
        trainer.fit(1)
    assert info.value.last_checkpoint is None


def test_resume_reproduces_uninterrupted_run(small, tiny_train, tmp_path):
    cfg_a = _relocate(tiny_train, tmp_path, "a")
    Trainer(cfg_a, small["train"], small["val"]).fit(2)

    cfg_b = _relocate(tiny_train, tmp_path, "b")
    first = Trainer(cfg_b, small["train"], small["val"]).fit(1)
    resumed = Trainer.resume(first, small["train"], small["val"], cfg_b.checkpoint_dir, cfg_b.log_path)
    assert resumed.epoch == 1
    resumed.fit(2)

    def epoch2(path):
        return [(r["step"], r["term"], r["value"]) for r in load_records_jsonl(path)
                if r["epoch"] == 2 and r["term"] in LOSS_TERMS]

    a, b = epoch2(cfg_a.log_path), epoch2(cfg_b.log_path)
    assert len(a) == len(b) > 0
    for (sa, ta, va), (sb, tb, vb) in zip(a, b):
        assert (sa, ta) == (sb, tb)
        assert vb == pytest.approx(va, rel=1e-6, abs=1e-9)


def test_checkpoint_reload_is_bit_identical(small, tiny_train, tmp_path):
    trainer = Trainer(tiny_train, small["train"], small["val"])
    path = trainer.fit(1)
    resumed = Trainer.resume(path, small["train"], small["val"], tmp_path / "again", tmp_path / "again.jsonl")
    resaved = resumed.save(tmp_path / "again" / "copy.bin")
    h1, p1 = load_checkpoint(path)
    h2, p2 = load_checkpoint(resaved)
    assert h1 == h2
    assert p1["model"].keys() == p2["model"].keys()
    assert all(torch.equal(p1["model"][k], p2["model"][k]) for k in p1["model"])
    assert p1["generic_dictionary"] == p2["generic_dictionary"]


def test_dictionary_free_variant_trains(small, tiny_train):
    cfg = ablation_variants("Y0", tiny_train)
    path = Trainer(cfg, small["train"], small["val"]).fit(1)
    trained = load_trained(path)
    assert trained.generic is None
    ident = small["val"].identities[0]
    lq, _ = degrade_image(load_aligned_image(ident.image_paths[0], 64), 1, "x4", 64)
    out = restore_image(trained.model, lq, load_landmarks(ident.landmark_paths[0]), None)
    assert out.shape == (64, 64, 3)


def test_train_entry_and_load_trained(small, tiny_train):
    path = train(tiny_train, small, max_epochs=1)
    trained = load_trained(path)
    assert trained.generic is not None and trained.generic.entries_per_dict == 4
    assert trained.header["epoch"] == 1
    assert trained.config.restorer.base_channels == 8
