from __future__ import annotations

import logging
import pathlib
from dataclasses import dataclass
from typing import List, Tuple

import cv2
import numpy as np

from .imagedata import LandmarkSet, frontal_landmarks, save_image, save_landmarks
from .utils_seed import derive_seed


logger = logging.getLogger(__name__)

SUPERSAMPLE = 4


@dataclass(frozen=True)
class IdentityTraits:
    """同一身份的所有图像共享的外观特征"""
    skin: Tuple[float, float, float]
    hair: Tuple[float, float, float]
    iris: Tuple[float, float, float]
    lips: Tuple[float, float, float]
    eye_w: float
    eye_h: float
    eye_dx: float
    brow_lift: float
    brow_thickness: int
    nose_len: float
    nose_w: float
    mouth_w: float
    jaw_w: float
    texture_seed: int


@dataclass(frozen=True)
class ImageVariation:
    """逐张变化：轻微位移、表情（张嘴）、光照方向"""
    shift: Tuple[float, float]
    mouth_open: float
    light_gradient: float
    light_level: float


def sample_traits(seed: int) -> IdentityTraits:
    rng = np.random.default_rng(seed)
    skin = tuple(float(v) for v in np.array([0.85, 0.68, 0.55]) * rng.uniform(0.6, 1.1) + rng.uniform(-0.05, 0.05, 3))
    return IdentityTraits(
        skin=tuple(float(np.clip(v, 0.15, 0.98)) for v in skin),
        hair=tuple(float(v) for v in rng.uniform(0.05, 0.6, 3)),
        iris=tuple(float(v) for v in rng.uniform(0.05, 0.8, 3)),
        lips=(float(rng.uniform(0.55, 0.85)), float(rng.uniform(0.2, 0.4)), float(rng.uniform(0.25, 0.45))),
        eye_w=float(rng.uniform(0.11, 0.16)),
        eye_h=float(rng.uniform(0.035, 0.07)),
        eye_dx=float(rng.uniform(0.15, 0.19)),
        brow_lift=float(rng.uniform(0.06, 0.10)),
        brow_thickness=int(rng.integers(1, 4)),
        nose_len=float(rng.uniform(0.12, 0.19)),
        nose_w=float(rng.uniform(0.09, 0.15)),
        mouth_w=float(rng.uniform(0.18, 0.28)),
        jaw_w=float(rng.uniform(0.32, 0.40)),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_variation(seed: int) -> ImageVariation:
    rng = np.random.default_rng(seed)
    return ImageVariation(
        shift=(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(-0.02, 0.02))),
        mouth_open=float(rng.choice([0.0, 0.0, rng.uniform(0.005, 0.03)])),
        light_gradient=float(rng.uniform(-0.15, 0.15)),
        light_level=float(rng.uniform(0.9, 1.1)),
    )


def _face_landmarks(traits: IdentityTraits, var: ImageVariation, size: int) -> LandmarkSet:
    return frontal_landmarks(
        size,
        eye_dx=traits.eye_dx,
        eye_w=traits.eye_w,
        eye_h=traits.eye_h,
        brow_lift=traits.brow_lift,
        nose_len=traits.nose_len,
        nose_w=traits.nose_w,
        mouth_w=traits.mouth_w,
        mouth_open=var.mouth_open,
        jaw_w=traits.jaw_w,
        shift=var.shift,
    )


def _poly(points: np.ndarray) -> np.ndarray:
    return np.round(points * SUPERSAMPLE).astype(np.int32).reshape(-1, 1, 2)


def render_face(traits: IdentityTraits, var: ImageVariation, size: int) -> Tuple[np.ndarray, LandmarkSet]:
    """
    以 4 倍分辨率绘制卡通人脸后 INTER_AREA 缩小（抗锯齿），返回 (图像, 关键点)
    """
    lm = _face_landmarks(traits, var, size)
    pts = lm.points
    big = size * SUPERSAMPLE
    canvas = np.empty((big, big, 3), dtype=np.float32)
    canvas[:] = traits.hair

    # 脸部轮廓：下颌 17 点 + 额头弧线
    cx = pts[8, 0]
    top = pts[19, 1] - 0.12 * size
    half_w = (pts[16, 0] - pts[0, 0]) / 2
    forehead = [(cx + half_w * np.cos(t), pts[0, 1] - (pts[0, 1] - top) * np.sin(t)) for t in np.linspace(0, np.pi, 12)]
    outline = np.concatenate([pts[0:17], np.array(forehead)], axis=0)
    cv2.fillPoly(canvas, [_poly(outline)], traits.skin, lineType=cv2.LINE_AA)

    # 身份固定的皮肤纹理
    tex_rng = np.random.default_rng(traits.texture_seed)
    tex = cv2.resize(tex_rng.normal(0, 0.04, (8, 8)).astype(np.float32), (big, big), interpolation=cv2.INTER_CUBIC)
    face_mask = np.zeros((big, big), dtype=np.float32)
    cv2.fillPoly(face_mask, [_poly(outline)], 1.0)
    canvas += (tex * face_mask)[..., None]

    dark = tuple(0.55 * c for c in traits.skin)
    # 眉毛
    for brow in (pts[17:22], pts[22:27]):
        cv2.polylines(canvas, [_poly(brow)], False, traits.hair, thickness=traits.brow_thickness * SUPERSAMPLE, lineType=cv2.LINE_AA)
    # 眼睛
    for eye in (pts[36:42], pts[42:48]):
        cv2.fillPoly(canvas, [_poly(eye)], (0.95, 0.95, 0.95), lineType=cv2.LINE_AA)
        center = eye.mean(axis=0) * SUPERSAMPLE
        radius = max(1, int(round((eye[:, 1].max() - eye[:, 1].min()) * 0.45 * SUPERSAMPLE)))
        cv2.circle(canvas, tuple(int(round(v)) for v in center), radius, traits.iris, -1, lineType=cv2.LINE_AA)
        cv2.circle(canvas, tuple(int(round(v)) for v in center), max(1, radius // 2), (0.02, 0.02, 0.02), -1, lineType=cv2.LINE_AA)
        cv2.polylines(canvas, [_poly(eye)], True, dark, thickness=SUPERSAMPLE // 2, lineType=cv2.LINE_AA)
    # 鼻子
    cv2.polylines(canvas, [_poly(pts[27:31])], False, dark, thickness=SUPERSAMPLE // 2, lineType=cv2.LINE_AA)
    cv2.polylines(canvas, [_poly(pts[31:36])], False, dark, thickness=SUPERSAMPLE, lineType=cv2.LINE_AA)
    # 嘴
    cv2.fillPoly(canvas, [_poly(pts[48:60])], traits.lips, lineType=cv2.LINE_AA)
    if var.mouth_open > 0:
        cv2.fillPoly(canvas, [_poly(pts[60:68])], (0.15, 0.05, 0.05), lineType=cv2.LINE_AA)

    # 光照：水平方向线性渐变
    ramp = np.linspace(-1.0, 1.0, big, dtype=np.float32)
    canvas *= (var.light_level * (1.0 + var.light_gradient * ramp))[None, :, None]

    img = cv2.resize(canvas, (size, size), interpolation=cv2.INTER_AREA)
    return np.clip(img, 0.0, 1.0).astype(np.float32), lm


def make_toy_corpus(
    root: str | pathlib.Path,
    identities: int,
    images_per_id: int,
    size: int = 64,
    seed: int = 0,
) -> List[pathlib.Path]:
    """
    生成预对齐的玩具人脸数据集：root/id_XXXX/NN.png + NN.lm
    """
    root = pathlib.Path(root)
    written: List[pathlib.Path] = []
    for i in range(identities):
        traits = sample_traits(derive_seed(seed, i))
        id_dir = root / f"id_{i:04d}"
        for j in range(images_per_id):
            img, lm = render_face(traits, sample_variation(derive_seed(seed, i, j)), size)
            path = id_dir / f"{j:02d}.png"
            save_image(img, path)
            save_landmarks(lm, path.with_suffix(".lm"))
            written.append(path)
    logger.info("玩具数据集已写入 %s：%d 个身份，%d 张图像", root, identities, len(written))
    return written
