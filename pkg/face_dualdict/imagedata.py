from __future__ import annotations

import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from .config import BASE_COMPONENT_SIZES, COMPONENTS
from .errors import DecodeError, DegenerateBoxError, EmptyDatasetError, OverlapError, SizeError
from .storage import ManifestRecord


logger = logging.getLogger(__name__)

NUM_LANDMARKS = 68
MAX_REFERENCES = 21
ROI_MARGIN = 0.25
# 关键点坐标统一量化到 1/64 像素网格，翻转 (x -> W - x) 可精确还原
LANDMARK_GRID = 64.0
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

COMPONENT_LANDMARKS: Dict[str, range] = {
    "left_eye": range(36, 42),
    "right_eye": range(42, 48),
    "nose": range(27, 36),
    "mouth": range(48, 68),
}


def _mirror_permutation() -> np.ndarray:
    pairs = [(i, 16 - i) for i in range(8)]  # 下颌
    pairs += [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]  # 眉毛
    pairs += [(31, 35), (32, 34)]  # 鼻翼
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]  # 眼睛
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]  # 外唇
    pairs += [(60, 64), (61, 63), (65, 67)]  # 内唇
    perm = np.arange(NUM_LANDMARKS)
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


MIRROR_PERMUTATION = _mirror_permutation()


# -----------------------------
# 图像读写
# -----------------------------
def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise SizeError(f"图像必须为 H×W×3，收到 {img.shape}")


def read_image(path: str | pathlib.Path) -> np.ndarray:
    """
    读取 8-bit RGB 图像 -> float32，取值 [0,1]
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"无法解码图像：{path}")
    if raw.dtype != np.uint8 or raw.ndim != 3 or raw.shape[2] != 3:
        raise DecodeError(f"图像必须为 8-bit 三通道：{path}（shape={raw.shape}, dtype={raw.dtype}）")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / np.float32(255.0)


def load_aligned_image(path: str | pathlib.Path, expected_size: int) -> np.ndarray:
    """
    读取已对齐的人脸图像；尺寸必须恰好为 expected_size × expected_size
    """
    img = read_image(path)
    if img.shape[0] != expected_size or img.shape[1] != expected_size:
        raise SizeError(f"{path}: 期望 {expected_size}×{expected_size}，实际 {img.shape[1]}×{img.shape[0]}")
    return img


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | pathlib.Path) -> None:
    check_image(img)
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(quantize_8bit(img), cv2.COLOR_RGB2BGR)):
        raise DecodeError(f"写入图像失败：{path}")


def to_gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ GRAY_WEIGHTS


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """H×W×3 -> 3×H×W float32"""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().float().clamp(0, 1).numpy().transpose(1, 2, 0).copy()


# -----------------------------
# 关键点
# -----------------------------
@dataclass
class LandmarkSet:
    points: np.ndarray  # (68, 2)，像素坐标 (x, y)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise DecodeError(f"关键点必须为 68×2，收到 {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DecodeError("关键点含非有限值")
        self.points = np.round(pts * LANDMARK_GRID) / LANDMARK_GRID

    def validate(self, image_size: int) -> None:
        if self.points.min() < 0 or self.points.max() > image_size:
            raise SizeError(f"关键点超出图像范围 [0, {image_size}]")


def load_landmarks(path: str | pathlib.Path) -> LandmarkSet:
    """
    读取关键点文件：68 行，每行 "x y"
    """
    try:
        rows = [line.split() for line in pathlib.Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        pts = np.array([[float(a), float(b)] for a, b in rows])
    except (OSError, ValueError) as e:
        raise DecodeError(f"无法解析关键点文件：{path}") from e
    return LandmarkSet(pts)


def save_landmarks(lm: LandmarkSet, path: str | pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{x:.6f} {y:.6f}\n" for x, y in lm.points), encoding="utf-8")


def frontal_landmarks(
    size: int,
    eye_y: float = 0.42,
    eye_dx: float = 0.17,
    eye_w: float = 0.13,
    eye_h: float = 0.05,
    brow_lift: float = 0.08,
    nose_len: float = 0.16,
    nose_w: float = 0.12,
    mouth_y: float = 0.74,
    mouth_w: float = 0.24,
    mouth_open: float = 0.0,
    jaw_w: float = 0.36,
    jaw_top: float = 0.40,
    chin_y: float = 0.93,
    shift: Tuple[float, float] = (0.0, 0.0),
) -> LandmarkSet:
    """
    按 68 点约定生成正脸关键点（参数为相对图像边长的比例）
    """
    cx, sy = 0.5 + shift[0], shift[1]
    pts = np.zeros((NUM_LANDMARKS, 2))
    for i in range(17):
        t = math.pi * i / 16
        pts[i] = (cx - jaw_w * math.cos(t), jaw_top + sy + (chin_y - jaw_top) * math.sin(t))
    ey = eye_y + sy
    # 眉毛：17..21 与 22..26 都按 x 递增排列
    for base, ex in ((17, cx - eye_dx), (22, cx + eye_dx)):
        for j in range(5):
            u = (j - 2) / 2.0
            pts[base + j] = (ex + u * 0.09, ey - brow_lift - 0.02 * (1 - u * u))
    for k in range(4):
        pts[27 + k] = (cx, ey + nose_len * k / 3)
    for k in range(5):
        pts[31 + k] = (cx + (k - 2) * nose_w / 4, ey + nose_len + 0.02)
    w6, h2 = eye_w / 6, eye_h / 2
    ex1, ex2 = cx - eye_dx, cx + eye_dx
    pts[36:42] = [
        (ex1 - eye_w / 2, ey), (ex1 - w6, ey - h2), (ex1 + w6, ey - h2),
        (ex1 + eye_w / 2, ey), (ex1 + w6, ey + h2), (ex1 - w6, ey + h2),
    ]
    pts[42:48] = [
        (ex2 - eye_w / 2, ey), (ex2 - w6, ey - h2), (ex2 + w6, ey - h2),
        (ex2 + eye_w / 2, ey), (ex2 + w6, ey + h2), (ex2 - w6, ey + h2),
    ]
    my, mw, mo = mouth_y + sy, mouth_w, mouth_open
    pts[48:60] = [
        (cx - mw / 2, my), (cx - mw / 3, my - 0.03), (cx - mw / 8, my - 0.04), (cx, my - 0.035),
        (cx + mw / 8, my - 0.04), (cx + mw / 3, my - 0.03), (cx + mw / 2, my),
        (cx + mw / 3, my + 0.03 + mo), (cx + mw / 8, my + 0.045 + mo), (cx, my + 0.05 + mo),
        (cx - mw / 8, my + 0.045 + mo), (cx - mw / 3, my + 0.03 + mo),
    ]
    pts[60:68] = [
        (cx - mw / 2.6, my), (cx - mw / 8, my - 0.01), (cx, my - 0.01), (cx + mw / 8, my - 0.01),
        (cx + mw / 2.6, my), (cx + mw / 8, my + 0.01 + mo), (cx, my + 0.01 + mo), (cx - mw / 8, my + 0.01 + mo),
    ]
    return LandmarkSet(np.clip(pts, 0.0, 1.0) * size)


def template_landmarks(size: int) -> LandmarkSet:
    """无关键点输入时使用的固定正脸模板"""
    return frontal_landmarks(size)


# -----------------------------
# 部件 ROI
# -----------------------------
@dataclass(frozen=True)
class ComponentROI:
    component: str
    box: Tuple[float, float, float, float]  # (x0, y0, x1, y1)，特征图坐标
    scale_factor: int
    canonical_size: Tuple[int, int]  # (h_c, w_c)


def canonical_size(
    component: str,
    scale_factor: int,
    coarsest_factor: int = 8,
    base_sizes: Optional[Dict[str, Tuple[int, int]]] = None,
) -> Tuple[int, int]:
    h, w = (base_sizes or BASE_COMPONENT_SIZES)[component]
    k = coarsest_factor // scale_factor
    return h * k, w * k


def landmarks_to_rois(
    lm: LandmarkSet,
    image_size: int,
    scale_factor: int,
    coarsest_factor: int = 8,
    base_sizes: Optional[Dict[str, Tuple[int, int]]] = None,
) -> Dict[str, ComponentROI]:
    """
    由 68 点关键点计算四个部件框：
    - 紧包围盒每边外扩 25%
    - 裁剪到图像范围，再除以 scale_factor 换算到特征图坐标
    """
    if scale_factor < 1 or image_size % scale_factor != 0:
        raise SizeError(f"scale_factor={scale_factor} 不能整除 image_size={image_size}")
    rois: Dict[str, ComponentROI] = {}
    for comp in COMPONENTS:
        pts = lm.points[list(COMPONENT_LANDMARKS[comp])]
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        tx0, tx1 = np.clip([x0, x1], 0, image_size)
        ty0, ty1 = np.clip([y0, y1], 0, image_size)
        if tx1 - tx0 <= 0 or ty1 - ty0 <= 0:
            raise DegenerateBoxError(f"{comp} 的关键点包围盒面积为 0")
        mx, my = ROI_MARGIN * (x1 - x0), ROI_MARGIN * (y1 - y0)
        box = np.clip([x0 - mx, y0 - my, x1 + mx, y1 + my], 0, image_size) / scale_factor
        rois[comp] = ComponentROI(
            component=comp,
            box=tuple(float(v) for v in box),
            scale_factor=scale_factor,
            canonical_size=canonical_size(comp, scale_factor, coarsest_factor, base_sizes),
        )
    return rois


# -----------------------------
# 清晰度
# -----------------------------
def laplacian_sharpness(img: np.ndarray) -> float:
    """
    灰度图 3×3 拉普拉斯响应的方差（边界按 reflect-101 延拓）
    """
    gray = to_gray(img)
    lap = cv2.Laplacian(gray, cv2.CV_64F, ksize=1, borderType=cv2.BORDER_REFLECT_101)
    return float(lap.var())


# -----------------------------
# 参考集清单
# -----------------------------
@dataclass
class IdentityRecord:
    identity_id: str
    image_paths: List[str]
    landmark_paths: List[str]
    sharpness_scores: List[float]


@dataclass
class ReferenceManifest:
    split: str
    identities: List[IdentityRecord] = field(default_factory=list)

    def records(self) -> List[ManifestRecord]:
        out: List[ManifestRecord] = []
        for ident in self.identities:
            for img, lmp, s in zip(ident.image_paths, ident.landmark_paths, ident.sharpness_scores):
                out.append(ManifestRecord(ident.identity_id, self.split, img, lmp, s))
        return out

    @property
    def identity_ids(self) -> List[str]:
        return [i.identity_id for i in self.identities]

    @property
    def num_images(self) -> int:
        return sum(len(i.image_paths) for i in self.identities)

    @classmethod
    def from_records(cls, records: Sequence[ManifestRecord], split: Optional[str] = None) -> "ReferenceManifest":
        grouped: Dict[str, IdentityRecord] = {}
        for r in records:
            ident = grouped.setdefault(r.identity_id, IdentityRecord(r.identity_id, [], [], []))
            ident.image_paths.append(r.image_path)
            ident.landmark_paths.append(r.landmark_path)
            ident.sharpness_scores.append(r.sharpness)
        split = split or (records[0].split if records else "test")
        return cls(split=split, identities=list(grouped.values()))


def _assert_disjoint(manifests: Dict[str, ReferenceManifest]) -> None:
    names = list(manifests)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = set(manifests[a].identity_ids) & set(manifests[b].identity_ids)
            if common:
                raise OverlapError(f"身份同时出现在 {a} 与 {b}：{sorted(common)[:5]}")


def build_reference_manifest(
    root_dir: str | pathlib.Path,
    min_sharpness: float,
    splits: Tuple[int, int, int],
    seed: int = 0,
    max_refs: int = MAX_REFERENCES,
) -> Dict[str, ReferenceManifest]:
    """
    扫描 root/identity_id/*.png（同名 .lm 关键点文件）：
    - 丢弃清晰度低于 min_sharpness 的图像，每个身份最多保留最清晰的 21 张
    - 剩余少于 2 张的身份整体丢弃
    - 按种子打乱后以身份为单位划分 train/val/test
    """
    root = pathlib.Path(root_dir)
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    kept: Dict[str, IdentityRecord] = {}
    for d in id_dirs:
        scored: List[Tuple[float, str, str]] = []
        for img_path in sorted(d.glob("*.png")):
            lm_path = img_path.with_suffix(".lm")
            if not lm_path.exists():
                logger.warning("缺少关键点文件，跳过：%s", img_path)
                continue
            score = laplacian_sharpness(read_image(img_path))
            if score >= min_sharpness:
                scored.append((score, str(img_path), str(lm_path)))
        scored.sort(key=lambda t: (-t[0], t[1]))
        scored = sorted(scored[:max_refs], key=lambda t: t[1])
        if len(scored) < 2:
            logger.info("身份 %s 仅剩 %d 张合格图像，已排除", d.name, len(scored))
            continue
        kept[d.name] = IdentityRecord(
            identity_id=d.name,
            image_paths=[t[1] for t in scored],
            landmark_paths=[t[2] for t in scored],
            sharpness_scores=[t[0] for t in scored],
        )
    if not kept:
        raise EmptyDatasetError(f"{root} 中没有可用身份")

    ids = sorted(kept)
    np.random.default_rng(seed).shuffle(ids)
    if sum(splits) > len(ids):
        logger.warning("可用身份 %d 个，少于请求的 %s，靠后的划分将变少", len(ids), splits)
    manifests: Dict[str, ReferenceManifest] = {}
    start = 0
    for name, n in zip(("train", "val", "test"), splits):
        chosen = ids[start:start + n]
        start += n
        manifests[name] = ReferenceManifest(split=name, identities=[kept[i] for i in chosen])
    _assert_disjoint(manifests)
    return manifests


# -----------------------------
# 数据增强
# -----------------------------
@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    brightness: float
    contrast: float
    saturation: float


def sample_augment_params(seed: int, jitter: float = 0.1) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    b, c, s = rng.uniform(1 - jitter, 1 + jitter, size=3)
    return AugmentParams(flip, float(b), float(c), float(s))


def hflip(img: np.ndarray, lm: LandmarkSet) -> Tuple[np.ndarray, LandmarkSet]:
    """水平翻转图像，并按镜像对应关系重排关键点（左右眼互换）"""
    w = img.shape[1]
    flipped = img[:, ::-1].copy()
    pts = lm.points.copy()
    pts[:, 0] = w - pts[:, 0]
    return flipped, LandmarkSet(pts[MIRROR_PERMUTATION])


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if brightness != 1.0:
        x = x * brightness
    if contrast != 1.0:
        m = to_gray(x).mean()
        x = (x - m) * contrast + m
    if saturation != 1.0:
        g = to_gray(x)[..., None]
        x = g + (x - g) * saturation
    return np.clip(x, 0.0, 1.0).astype(img.dtype)


def apply_augment(img: np.ndarray, lm: LandmarkSet, params: AugmentParams) -> Tuple[np.ndarray, LandmarkSet]:
    if params.flip:
        img, lm = hflip(img, lm)
    return color_jitter(img, params.brightness, params.contrast, params.saturation), lm


def augment(img: np.ndarray, lm: LandmarkSet, seed: int) -> Tuple[np.ndarray, LandmarkSet]:
    """
    训练增强：以 0.5 概率水平翻转；亮度/对比度/饱和度各自在 [0.9, 1.1] 内抖动
    """
    return apply_augment(img, lm, sample_augment_params(seed))
