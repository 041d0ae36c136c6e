from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.table import Table

from .degrade import degrade_image, parse_task
from .errors import ShapeMismatchError, UnknownVariantError
from .imagedata import ReferenceManifest, augment, load_aligned_image, load_landmarks, to_gray, to_tensor
from .network import restore_image, specific_bank_from_refs
from .storage import atomic_write_bytes, load_records_jsonl, save_records_jsonl
from .utils_seed import derive_seed, seed_everything


logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FACE_CROP = 0.8
VARIANTS: Tuple[str, ...] = ("input", "generic_only", "full")
METRICS: Tuple[str, ...] = ("psnr_db", "ssim", "id_cosine")
EXCLUDED_NOTE = "LPIPS 与 FID 未计算（需要大型预训练网络）"


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} 与 gt {gt.shape} 形状不一致")


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10·log10(1/MSE)，[0,1] 图像；MSE < 1e-10 时取上限 100 dB"""
    _check_pair(pred, gt)
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    k = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA, cv2.CV_64F)
    return k @ k.T


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    灰度 SSIM：11×11 高斯窗（σ=1.5），C1=(0.01)²，C2=(0.03)²，L=1；只在窗完全落入图像的区域取平均
    """
    _check_pair(pred, gt)
    x = to_gray(pred) if pred.ndim == 3 else np.asarray(pred, np.float64)
    y = to_gray(gt) if gt.ndim == 3 else np.asarray(gt, np.float64)
    win = _gaussian_window()

    def filt(a: np.ndarray) -> np.ndarray:
        return cv2.filter2D(a, cv2.CV_64F, win, borderType=cv2.BORDER_REFLECT_101)

    ux, uy = filt(x), filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (SSIM_WINDOW - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


# -----------------------------
# 身份特征
# -----------------------------
class IdentityEmbedder(nn.Module):
    """4 层卷积 + 分类头；倒数第二层（L2 归一化）作为身份嵌入"""

    def __init__(self, num_identities: int, channels: int = 32, embed_dim: int = 64):
        super().__init__()
        c = channels
        self.num_identities = num_identities
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, embed_dim, 3, stride=1, padding=1),
        )
        self.classifier = nn.Linear(embed_dim, num_identities)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(x).mean(dim=(2, 3)), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x) * 10.0)


def face_crop(img: np.ndarray) -> np.ndarray:
    """中央 80% 区域"""
    h, w = img.shape[:2]
    mh, mw = int(round(h * (1 - FACE_CROP) / 2)), int(round(w * (1 - FACE_CROP) / 2))
    return img[mh:h - mh, mw:w - mw]


def identity_cosine(pred: np.ndarray, gt: np.ndarray, embedder: IdentityEmbedder) -> float:
    _check_pair(pred, gt)
    embedder.eval()
    with torch.no_grad():
        batch = torch.stack([to_tensor(face_crop(pred)), to_tensor(face_crop(gt))])
        e = embedder.embed(batch)
    return float(torch.clamp((e[0] * e[1]).sum(), -1.0, 1.0))


def train_identity_embedder(
    manifest: ReferenceManifest,
    image_size: int,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> IdentityEmbedder:
    """
    在玩具身份上训练分类器；每张图做翻转/颜色抖动并随机退化，使嵌入对画质不敏感
    """
    seed_everything(seed)
    samples: List[Tuple[np.ndarray, object, int]] = []
    for label, ident in enumerate(manifest.identities):
        for p, l in zip(ident.image_paths, ident.landmark_paths):
            samples.append((load_aligned_image(p, image_size), load_landmarks(l), label))
    model = IdentityEmbedder(len(manifest.identities))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        order = torch.randperm(len(samples), generator=gen).tolist()
        total = 0.0
        for start in range(0, len(order), batch_size):
            xs, ys = [], []
            for i in order[start:start + batch_size]:
                img, lm, label = samples[i]
                s = derive_seed(seed, epoch, i)
                img, _ = augment(img, lm, derive_seed(s, 0))
                if s % 2:
                    img, _ = degrade_image(img, derive_seed(s, 1), "random", image_size)
                xs.append(to_tensor(face_crop(img)))
                ys.append(label)
            logits = model(torch.stack(xs))
            loss = F.cross_entropy(logits, torch.tensor(ys))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(ys)
        logger.debug("身份嵌入 epoch %d loss=%.4f", epoch + 1, total / len(samples))
    model.eval()
    return model


def save_embedder(model: IdentityEmbedder, path: str | pathlib.Path) -> None:
    buf = io.BytesIO()
    torch.save({"num_identities": model.num_identities, "state_dict": model.state_dict()}, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_embedder(path: str | pathlib.Path) -> IdentityEmbedder:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = IdentityEmbedder(int(blob["num_identities"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


# -----------------------------
# 评估报告
# -----------------------------
@dataclass
class EvalReport:
    task: str
    seed: int
    variants: Tuple[str, ...]
    records: List[Dict] = field(default_factory=list)

    def aggregates(self) -> Dict[str, Dict[str, Optional[float]]]:
        out: Dict[str, Dict[str, Optional[float]]] = {}
        for v in self.variants:
            rows = [r for r in self.records if r["variant"] == v]
            agg: Dict[str, Optional[float]] = {"count": len(rows)}
            for m in METRICS:
                vals = [r[m] for r in rows if r[m] is not None]
                agg[m] = float(np.mean(vals)) if vals else None
            out[v] = agg
        return out

    def header(self) -> Dict:
        return {"type": "header", "task": self.task, "seed": self.seed, "variants": list(self.variants), "note": EXCLUDED_NOTE}

    def to_rows(self) -> List[Dict]:
        aggs = self.aggregates()
        rows = [self.header()]
        rows += [dict(r, type="record") for r in self.records]
        rows += [dict(a, type="aggregate", variant=v) for v, a in aggs.items()]
        rows.append({"type": "checksum", "sha256": aggregate_digest(aggs)})
        return rows


def aggregate_digest(aggs: Dict) -> str:
    return hashlib.sha256(json.dumps(aggs, sort_keys=True).encode("utf-8")).hexdigest()


def save_report(report: EvalReport, path: str | pathlib.Path) -> None:
    save_records_jsonl(report.to_rows(), path)


def load_report(path: str | pathlib.Path) -> EvalReport:
    rows = load_records_jsonl(path)
    head = rows[0]
    records = [{k: v for k, v in r.items() if k != "type"} for r in rows if r.get("type") == "record"]
    return EvalReport(task=head["task"], seed=int(head["seed"]), variants=tuple(head["variants"]), records=records)


def verify_report(path: str | pathlib.Path) -> bool:
    """由逐图记录重新计算均值，并与报告中的校验值比较"""
    rows = load_records_jsonl(path)
    stored = next(r["sha256"] for r in rows if r.get("type") == "checksum")
    return aggregate_digest(load_report(path).aggregates()) == stored


def report_table(report: EvalReport) -> Table:
    table = Table(title=f"评估结果（{report.task}，seed={report.seed}）")
    table.add_column("variant")
    table.add_column("count", justify="right")
    for m in METRICS:
        table.add_column(m, justify="right")
    for v, agg in report.aggregates().items():
        table.add_row(v, str(agg["count"]), *("-" if agg[m] is None else f"{agg[m]:.4f}" for m in METRICS))
    return table


def evaluate(
    trained,
    manifest: ReferenceManifest,
    task: str,
    seed: int = 0,
    embedder: Optional[IdentityEmbedder] = None,
    variants: Sequence[str] = VARIANTS,
    progress: Optional[callable] = None,
) -> EvalReport:
    """
    对清单中每张测试图：按 (seed, 序号) 合成 LQ，分别记录
    input（退化输入本身）、generic_only（不用专属字典）、full（用同身份其余图构建专属字典）
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UnknownVariantError(f"未知评估变体：{unknown}")
    task = parse_task(task).value
    model = trained.model
    size = trained.config.restorer.input_size
    items = [(ident, j) for ident in manifest.identities for j in range(len(ident.image_paths))]
    iterator: Iterable = progress(items) if progress else items
    report = EvalReport(task=task, seed=seed, variants=tuple(variants))
    for index, (ident, j) in enumerate(iterator):
        path = ident.image_paths[j]
        gt = load_aligned_image(path, size)
        lm = load_landmarks(ident.landmark_paths[j])
        lq, params = degrade_image(gt, derive_seed(seed, index), task, size)
        outputs: Dict[str, np.ndarray] = {}
        for v in variants:
            if v == "input":
                outputs[v] = lq
            elif v == "generic_only":
                outputs[v] = restore_image(model, lq, lm, trained.generic, None)
            elif v == "full":
                refs = [
                    (load_aligned_image(p, size), load_landmarks(l))
                    for k, (p, l) in enumerate(zip(ident.image_paths, ident.landmark_paths)) if k != j
                ]
                with torch.no_grad():
                    specific = specific_bank_from_refs(model, refs, ident.identity_id).snapshot()
                outputs[v] = restore_image(model, lq, lm, trained.generic, specific)
        for v, out in outputs.items():
            report.records.append({
                "path": path,
                "variant": v,
                "psnr_db": psnr(out, gt),
                "ssim": ssim(out, gt),
                "id_cosine": identity_cosine(out, gt, embedder) if embedder is not None else None,
            })
        logger.debug("%s: %s", path, params)
    return report
