from __future__ import annotations

import logging
import math
import pathlib
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from .config import TrainConfig, apply_overrides, config_to_dict
from .degrade import degrade_image
from .dictionary import (
    STAGE_ORDER,
    DictionaryBank,
    DictionaryStage,
    build_specific,
    deserialize,
    init_generic,
    random_generic,
    serialize,
)
from .errors import DataError, DivergenceError, StageError, UnknownVariantError
from .imagedata import LandmarkSet, ReferenceManifest, augment, load_aligned_image, load_landmarks, to_tensor
from .losses import FeatureTaps, adversarial_losses, mse_loss, perceptual_loss, reconstruction_loss, style_loss, total_loss
from .network import FaceRestorationModel, MultiScaleDiscriminator
from .storage import JsonlLog
from .utils_seed import derive_seed, seed_everything, torch_generator


logger = logging.getLogger(__name__)

DESK_Y_GRID: Tuple[int, ...] = (0, 4, 8, 16, 32)
FULL_Y_GRID: Tuple[int, ...] = (0, 32, 64, 128, 256)
VARIANT_NAMES: Tuple[str, ...] = (
    "full", "generic_only", "specific_only", "no_transform", "1T", "2T", "OB", "wo_F", "wo_B",
    *(f"Y{y}" for y in sorted(set(DESK_Y_GRID + FULL_Y_GRID))),
)


# -----------------------------
# 平台期检测
# -----------------------------
def plateau_detector(history: Sequence[float], patience: int, min_delta: float, relative: bool = True) -> bool:
    """
    最优值连续 patience 个 epoch 没有改进超过 min_delta（默认按相对值）时返回 True
    """
    if not history:
        return False
    best = history[0]
    since = 0
    for v in history[1:]:
        threshold = min_delta * abs(best) if relative else min_delta
        if best - v > threshold:
            best = v
            since = 0
        else:
            since += 1
    return since >= patience


# -----------------------------
# 消融配置
# -----------------------------
def ablation_variants(name: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    full / generic_only / specific_only / no_transform / kT / Yn / OB / wo_F / wo_B -> 训练配置
    """
    base = base or TrainConfig()
    cfg = apply_overrides(base, {})
    r = cfg.restorer
    if name == "full":
        pass
    elif name == "generic_only":
        r.use_specific = False
    elif name == "specific_only":
        r.use_generic = False
    elif name == "no_transform":
        r.read_mode = "best_match"
    elif name == "OB":
        cfg.random_init_dictionary = True
    elif name == "wo_F":
        cfg.skip_stages = ("FORWARD",)
    elif name == "wo_B":
        cfg.skip_stages = ("BACKWARD",)
    elif m := re.fullmatch(r"(\d+)T", name):
        r.transform_count = int(m.group(1))
    elif m := re.fullmatch(r"Y(\d+)", name):
        r.dict_size = int(m.group(1))
        if r.dict_size == 0:
            r.channel_multiplier = 2
    else:
        raise UnknownVariantError(f"未知消融变体：{name}（可选：{', '.join(VARIANT_NAMES)}）")
    cfg.validate()
    return cfg


# -----------------------------
# 数据
# -----------------------------
class FaceSampleDataset(Dataset):
    """
    每个样本：HQ（增强后）、由 HQ 合成的 LQ、关键点、同身份参考图（不含 HQ 本身）
    随机性全部由 derive_seed(seed, epoch, index) 决定
    """

    def __init__(
        self,
        manifest: ReferenceManifest,
        config: TrainConfig,
        training: bool = True,
        task: Optional[str] = None,
    ):
        self.config = config
        self.size = config.restorer.input_size
        self.training = training
        self.task = task or config.task
        self.identities = manifest.identities
        self.items: List[Tuple[int, int]] = [
            (i, j) for i, ident in enumerate(self.identities) for j in range(len(ident.image_paths))
        ]
        self.epoch = 0
        self._cache: Dict[str, Tuple[np.ndarray, LandmarkSet]] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.items)

    def _load(self, ident_idx: int, img_idx: int) -> Tuple[np.ndarray, LandmarkSet]:
        ident = self.identities[ident_idx]
        path = ident.image_paths[img_idx]
        if path not in self._cache:
            img = load_aligned_image(path, self.size)
            lm = load_landmarks(ident.landmark_paths[img_idx])
            lm.validate(self.size)
            self._cache[path] = (img, lm)
        return self._cache[path]

    def __getitem__(self, index: int) -> Dict:
        ident_idx, img_idx = self.items[index]
        ident = self.identities[ident_idx]
        s = derive_seed(self.config.seed, self.epoch if self.training else 0, index)
        hq, lm = self._load(ident_idx, img_idx)
        if self.training:
            hq, lm = augment(hq, lm, derive_seed(s, 0))
        lq, params = degrade_image(hq, derive_seed(s, 1), self.task, self.size)

        others = [j for j in range(len(ident.image_paths)) if j != img_idx]
        limit = min(self.config.max_refs_per_sample, len(others))
        if self.training:
            rng = np.random.default_rng(derive_seed(s, 2))
            k = int(rng.integers(0, limit + 1))
            chosen = sorted(rng.choice(others, size=k, replace=False).tolist()) if k else []
        else:
            chosen = others[:limit]
        return {
            "hq": to_tensor(hq),
            "lq": to_tensor(lq),
            "landmarks": lm,
            "refs": [self._load(ident_idx, j) for j in chosen],
            "identity": ident.identity_id,
            "path": ident.image_paths[img_idx],
            "params": params.to_dict(),
        }


def collate_samples(batch: List[Dict]) -> Dict:
    return {
        "hq": torch.stack([b["hq"] for b in batch]),
        "lq": torch.stack([b["lq"] for b in batch]),
        "landmarks": [b["landmarks"] for b in batch],
        "refs": [b["refs"] for b in batch],
        "identity": [b["identity"] for b in batch],
        "path": [b["path"] for b in batch],
    }


def select_dictionary_images(manifest: ReferenceManifest, count: int, seed: int) -> List[Tuple[str, str, str]]:
    """从 count 个不同身份中各取一张图，用于初始化通用字典"""
    if count > len(manifest.identities):
        raise DataError(f"通用字典需要 {count} 个不同身份，训练集只有 {len(manifest.identities)} 个")
    rng = np.random.default_rng(derive_seed(seed, 7))
    picked = []
    for i in rng.choice(len(manifest.identities), size=count, replace=False).tolist():
        ident = manifest.identities[i]
        j = int(rng.integers(len(ident.image_paths)))
        picked.append((ident.identity_id, ident.image_paths[j], ident.landmark_paths[j]))
    return picked


# -----------------------------
# 训练器
# -----------------------------
@dataclass
class TrainedModel:
    config: TrainConfig
    model: FaceRestorationModel
    generic: Optional[DictionaryBank]
    header: Dict


class Trainer:
    """
    三阶段训练：INIT -> FORWARD -> BACKWARD -> FROZEN，阶段切换由验证集重建损失的平台期触发；
    FROZEN 阶段再遇平台期则 lr_theta 减半
    """

    def __init__(
        self,
        config: TrainConfig,
        train_manifest: ReferenceManifest,
        val_manifest: Optional[ReferenceManifest] = None,
        checkpoint_dir: Optional[str | pathlib.Path] = None,
        log_path: Optional[str | pathlib.Path] = None,
        fresh: bool = True,
    ):
        config.validate()
        if not train_manifest.identities:
            raise DataError("训练清单为空")
        self.config = config
        seed_everything(config.seed)
        rc = config.restorer
        self.model = FaceRestorationModel(rc)
        self.disc = MultiScaleDiscriminator(rc.base_channels)
        self.taps = FeatureTaps()
        self.weights = config.weights

        betas = tuple(config.adam_betas)
        self.opt_g = torch.optim.Adam(
            [
                {"params": list(self.model.restorer.parameters()), "name": "theta"},
                {"params": list(self.model.memory.parameters()), "name": "gamma"},
                {"params": list(self.model.generic_extractor.parameters()), "name": "theta_gen"},
                {"params": list(self.model.specific_extractor.parameters()), "name": "theta_spe"},
            ],
            lr=config.lr_theta,
            betas=betas,
        )
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.lr_theta, betas=betas)
        self.opt_dict: Optional[torch.optim.SGD] = None

        self.train_set = FaceSampleDataset(train_manifest, config, training=True)
        if val_manifest is None or not val_manifest.identities:
            logger.warning("验证清单为空，改用训练清单计算验证损失")
            val_manifest = train_manifest
        self.val_set = FaceSampleDataset(val_manifest, config, training=False)

        self.dicts_on = rc.dictionaries_enabled and bool(rc.transform_scales())
        self.use_generic = self.dicts_on and rc.use_generic
        self.use_specific = self.dicts_on and rc.use_specific
        self.dict_sources: List[Tuple[str, str, str]] = []
        if self.use_generic and not config.random_init_dictionary:
            self.dict_sources = select_dictionary_images(train_manifest, rc.dict_size, config.seed)
            self.dict_images = torch.stack([to_tensor(load_aligned_image(p, rc.input_size)) for _, p, _ in self.dict_sources])
            self.dict_landmarks = [load_landmarks(l) for _, _, l in self.dict_sources]

        self.checkpoint_dir = pathlib.Path(checkpoint_dir or config.checkpoint_dir)
        self.log = JsonlLog(log_path or config.log_path)
        self.stage = DictionaryStage.INIT
        self.epoch = 0
        self.step = 0
        self.stage_epochs = 0
        self.history: List[float] = []
        self.val_history: List[float] = []
        self.last_checkpoint: Optional[pathlib.Path] = None

        if fresh and self.use_generic and config.random_init_dictionary:
            self.model.memory.set_bank(random_generic(rc, derive_seed(config.seed, 11), self.model.generic_extractor))
            self._enter_stage(DictionaryStage.FORWARD, reason="random_init")
            if self.stage == DictionaryStage.FORWARD:
                self._enter_stage(DictionaryStage.BACKWARD, reason="random_init")
    # ---- 字典 ----
    def live_generic(self) -> DictionaryBank:
        ids = [i for i, _, _ in self.dict_sources]
        return init_generic(self.model.generic_extractor, self.dict_images, self.dict_landmarks, ids)

    def current_generic(self) -> Optional[DictionaryBank]:
        """当前通用字典的快照（推理 / 保存用）"""
        if not self.use_generic:
            return None
        if self.stage == DictionaryStage.INIT:
            with torch.no_grad():
                return self.live_generic().snapshot()
        return self.model.memory.bank

    def sync_specific_extractor(self) -> None:
        """Θ_spe <- Θ_gen（离开 INIT 时），并清空 Θ_spe 的 Adam 状态"""
        self.model.sync_specific_from_generic()
        for p in self.model.specific_extractor.parameters():
            self.opt_g.state.pop(p, None)
        logger.debug("专属特征提取器已从通用特征提取器复制")

    def _enter_stage(self, target: DictionaryStage, reason: str = "plateau") -> None:
        if STAGE_ORDER.index(target) != STAGE_ORDER.index(self.stage) + 1:
            raise StageError(f"阶段必须按顺序推进：{self.stage.value} -> {target.value}")
        if target == DictionaryStage.FORWARD and self.use_specific:
            self.sync_specific_extractor()
        if self.use_generic:
            memory = self.model.memory
            if target == DictionaryStage.FORWARD and memory.bank is None:
                with torch.no_grad():
                    memory.set_bank(self.live_generic())
            memory.advance(target)
            self.opt_dict = (
                torch.optim.SGD(memory.bank.entry_tensors(), lr=self.config.lr_dict)
                if target == DictionaryStage.BACKWARD else None
            )
        logger.info("训练阶段 %s -> %s（%s）", self.stage.value, target.value, reason)
        self.log.write({"step": self.step, "epoch": self.epoch, "stage": target.value, "term": "stage", "value": reason})
        self.stage = target
        self.stage_epochs = 0
        self.history = []
        if target.value in self.config.skip_stages and target != DictionaryStage.FROZEN:
            self._enter_stage(STAGE_ORDER[STAGE_ORDER.index(target) + 1], reason="skip")

    def _generic_for_step(self, batch: Dict) -> Optional[DictionaryBank]:
        if not self.use_generic:
            return None
        if self.stage == DictionaryStage.INIT:
            return self.live_generic()
        bank = self.model.memory.bank
        if self.stage == DictionaryStage.FORWARD:
            gt = self.model.generic_extractor(batch["hq"], batch["landmarks"])
            return self.model.memory.apply_forward_updates(bank, gt)
        return bank

    def _specific_for_batch(self, batch: Dict, extractor=None) -> Optional[List[Optional[DictionaryBank]]]:
        if not self.use_specific:
            return None
        extractor = extractor or self.model.specific_extractor
        banks: List[Optional[DictionaryBank]] = []
        for refs, ident in zip(batch["refs"], batch["identity"]):
            if not refs:
                banks.append(None)
                continue
            imgs = torch.stack([to_tensor(img) for img, _ in refs])
            banks.append(build_specific(extractor, imgs, [lm for _, lm in refs], ident))
        return banks

    # ---- 单步 ----
    def train_step(self, batch: Dict) -> Dict[str, float]:
        self.model.train()
        hq, lq, lms = batch["hq"], batch["lq"], batch["landmarks"]
        generic = self._generic_for_step(batch)
        specific = self._specific_for_batch(batch)
        out = self.model(lq, lms, generic, specific)

        self.opt_d.zero_grad(set_to_none=True)
        loss_d = adversarial_losses(self.disc(hq), self.disc(out.detach()), "D", self.weights)
        loss_d.backward()
        self.opt_d.step()

        terms = {
            "mse": mse_loss(out, hq),
            "perceptual": perceptual_loss(out, hq, self.taps),
            "style": style_loss(out, hq, self.taps),
            "adv_g": adversarial_losses(None, self.disc(out), "G", self.weights),
        }
        total, breakdown = total_loss(terms, self.weights)
        breakdown["adv_d"] = float(loss_d.detach())
        if not all(math.isfinite(v) for v in breakdown.values()):
            last = str(self.last_checkpoint) if self.last_checkpoint else None
            raise DivergenceError(f"第 {self.step} 步损失出现非有限值：{breakdown}", last_checkpoint=last)

        self.opt_g.zero_grad(set_to_none=True)
        if self.opt_dict is not None:
            self.opt_dict.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        if self.opt_dict is not None:
            self.opt_dict.step()

        if self.stage == DictionaryStage.FORWARD and generic is not None:
            self.model.memory.set_bank(generic.snapshot())

        self.step += 1
        self.log.write_many(
            {"step": self.step, "epoch": self.epoch + 1, "stage": self.stage.value, "term": k, "value": v}
            for k, v in breakdown.items()
        )
        return breakdown

    # ---- epoch ----
    def validate(self) -> float:
        loader = DataLoader(self.val_set, batch_size=self.config.batch_size, shuffle=False,
                            collate_fn=collate_samples, num_workers=self.config.num_workers)
        total, count = 0.0, 0
        self.model.eval()
        with torch.no_grad():
            generic = self.current_generic()
            for batch in loader:
                out = self.model(batch["lq"], batch["landmarks"], generic, self._specific_for_batch(batch))
                n = batch["hq"].shape[0]
                total += float(reconstruction_loss(out, batch["hq"], self.taps, self.weights)) * n
                count += n
        return total / max(count, 1)

    def run_epoch(self) -> float:
        epoch = self.epoch + 1
        self.train_set.set_epoch(epoch)
        loader = DataLoader(
            self.train_set,
            batch_size=self.config.batch_size,
            shuffle=True,
            generator=torch_generator(derive_seed(self.config.seed, epoch)),
            collate_fn=collate_samples,
            num_workers=self.config.num_workers,
        )
        frozen_hash = self.model.memory.bank.content_hash() if (
            self.use_generic and self.stage == DictionaryStage.FROZEN) else None
        for batch in loader:
            self.train_step(batch)
        if frozen_hash is not None and self.model.memory.bank.content_hash() != frozen_hash:
            raise StageError("FROZEN 阶段的通用字典在训练中被修改")

        val = self.validate()
        self.epoch = epoch
        self.val_history.append(val)
        self.history.append(val)
        self.stage_epochs += 1
        self.log.write({"step": self.step, "epoch": epoch, "stage": self.stage.value, "term": "val_rec", "value": val})
        logger.info("epoch %d [%s] val_rec=%.6f", epoch, self.stage.value, val)

        cfg = self.config
        forced = cfg.max_stage_epochs is not None and self.stage_epochs >= cfg.max_stage_epochs
        if plateau_detector(self.history, cfg.plateau_patience, cfg.plateau_min_delta) or forced:
            if self.stage != DictionaryStage.FROZEN:
                self._enter_stage(STAGE_ORDER[STAGE_ORDER.index(self.stage) + 1], "max_stage_epochs" if forced else "plateau")
            else:
                self.decay_learning_rate()
        self.last_checkpoint = self.save(self.checkpoint_dir / checkpoint_name(epoch))
        return val

    def decay_learning_rate(self) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] *= self.config.lr_decay
        logger.info("学习率衰减为 %.3g", self.opt_g.param_groups[0]["lr"])
        self.log.write({"step": self.step, "epoch": self.epoch, "stage": self.stage.value,
                        "term": "lr_theta", "value": self.opt_g.param_groups[0]["lr"]})
        self.history = []
        self.stage_epochs = 0

    def fit(self, max_epochs: Optional[int] = None) -> Optional[pathlib.Path]:
        end = max_epochs if max_epochs is not None else self.config.max_epochs
        while self.epoch < end:
            self.run_epoch()
        return self.last_checkpoint

    # ---- 检查点 ----
    def save(self, path: str | pathlib.Path) -> pathlib.Path:
        generic = self.current_generic()
        header = {
            "epoch": self.epoch,
            "step": self.step,
            "stage": self.stage.value,
            "stage_epochs": self.stage_epochs,
            "history": self.history,
            "val_history": self.val_history,
            "config": config_to_dict(self.config),
            "dictionary_sources": [list(s) for s in self.dict_sources],
        }
        payload = {
            "model": self.model.state_dict(),
            "discriminator": self.disc.state_dict(),
            "taps": self.taps.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "opt_dict": self.opt_dict.state_dict() if self.opt_dict is not None else None,
            "generic_dictionary": serialize(generic) if generic is not None else None,
        }
        return save_checkpoint(path, header, payload)

    @classmethod
    def resume(
        cls,
        path: str | pathlib.Path,
        train_manifest: ReferenceManifest,
        val_manifest: Optional[ReferenceManifest] = None,
        checkpoint_dir: Optional[str | pathlib.Path] = None,
        log_path: Optional[str | pathlib.Path] = None,
    ) -> "Trainer":
        header, payload = load_checkpoint(path)
        config = config_from_header(header)
        trainer = cls(config, train_manifest, val_manifest, checkpoint_dir, log_path, fresh=False)
        trainer.load_state(header, payload)
        trainer.last_checkpoint = pathlib.Path(path)
        trainer.log.truncate_after(trainer.epoch)
        return trainer

    def load_state(self, header: Dict, payload: Dict) -> None:
        self.model.load_state_dict(payload["model"])
        self.disc.load_state_dict(payload["discriminator"])
        self.taps.load_state_dict(payload["taps"])
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        self.epoch = int(header["epoch"])
        self.step = int(header["step"])
        self.stage = DictionaryStage(header["stage"])
        self.stage_epochs = int(header["stage_epochs"])
        self.history = list(header["history"])
        self.val_history = list(header["val_history"])
        self.opt_dict = None
        if self.use_generic and self.stage != DictionaryStage.INIT:
            self.model.memory.set_bank(deserialize(payload["generic_dictionary"]))
            if self.stage == DictionaryStage.BACKWARD:
                self.opt_dict = torch.optim.SGD(self.model.memory.bank.entry_tensors(), lr=self.config.lr_dict)
                if payload.get("opt_dict") is not None:
                    self.opt_dict.load_state_dict(payload["opt_dict"])
        else:
            self.model.memory.bank = None
            self.model.memory.stage = self.stage


def config_from_header(header: Dict) -> TrainConfig:
    cfg = apply_overrides(TrainConfig(), header["config"])
    cfg.validate()
    return cfg


def train(
    config: TrainConfig,
    manifests: Dict[str, ReferenceManifest],
    resume: Optional[str | pathlib.Path] = None,
    max_epochs: Optional[int] = None,
) -> Optional[pathlib.Path]:
    """训练入口：返回最后一个检查点路径"""
    if resume:
        trainer = Trainer.resume(resume, manifests["train"], manifests.get("val"),
                                 config.checkpoint_dir, config.log_path)
    else:
        trainer = Trainer(config, manifests["train"], manifests.get("val"))
    return trainer.fit(max_epochs)


def load_trained(path: str | pathlib.Path) -> TrainedModel:
    """从检查点恢复推理用的模型与通用字典"""
    header, payload = load_checkpoint(path)
    config = config_from_header(header)
    model = FaceRestorationModel(config.restorer)
    model.load_state_dict(payload["model"])
    model.eval()
    raw = payload.get("generic_dictionary")
    generic = deserialize(raw).snapshot() if raw else None
    return TrainedModel(config=config, model=model, generic=generic, header=header)

