from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Tuple

import cv2
import numpy as np

from .errors import EncodeError, UsageError
from .imagedata import check_image
from .utils_seed import derive_seed


logger = logging.getLogger(__name__)

# 参数网格
RHO_GRID: Tuple[float, ...] = tuple(round(1.0 + 0.1 * k, 1) for k in range(21))  # 1.0 .. 3.0
R_GRID: Tuple[float, ...] = tuple(round(1.0 + 0.1 * k, 1) for k in range(91))  # 1.0 .. 10.0
SIGMA_GRID: Tuple[int, ...] = tuple(range(0, 16))
Q_GRID: Tuple[int, ...] = tuple(range(50, 101))


class Task(str, Enum):
    X4 = "x4"
    X8 = "x8"
    RANDOM = "random"

    @property
    def fixed_scale(self) -> float | None:
        return {Task.X4: 4.0, Task.X8: 8.0}.get(self)


def parse_task(value: str | Task) -> Task:
    try:
        return Task(value)
    except ValueError:
        raise UsageError(f"未知任务：{value}（可选 x4 / x8 / random）")


@dataclass(frozen=True)
class DegradationParams:
    rho: float  # 高斯模糊标准差（像素）
    r: float  # 下采样倍数
    sigma: int  # 噪声标准差（8-bit 单位）
    q: int  # JPEG 质量

    def to_dict(self) -> Dict:
        return asdict(self)


def sample_params(seed: int, task: str | Task = Task.RANDOM) -> DegradationParams:
    """
    从网格中均匀抽取退化参数；x4/x8 任务固定 r
    """
    task = parse_task(task)
    rng = np.random.default_rng(seed)
    rho = RHO_GRID[int(rng.integers(len(RHO_GRID)))]
    r = R_GRID[int(rng.integers(len(R_GRID)))]
    sigma = SIGMA_GRID[int(rng.integers(len(SIGMA_GRID)))]
    q = Q_GRID[int(rng.integers(len(Q_GRID)))]
    if task.fixed_scale is not None:
        r = task.fixed_scale
    return DegradationParams(rho=rho, r=r, sigma=sigma, q=q)


def gaussian_kernel(rho: float) -> np.ndarray:
    """边长 2⌈3ρ⌉+1 的归一化各向同性高斯核（float64）"""
    if rho <= 0:
        raise UsageError(f"rho 必须为正，收到 {rho}")
    radius = int(math.ceil(3 * rho))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx ** 2 + yy ** 2) / (2 * rho ** 2))
    return k / k.sum()


def downsample_size(size: int, r: float) -> int:
    return max(1, int(round(size / r)))


def _jpeg_u8(u8: np.ndarray, q: int) -> np.ndarray:
    if u8.ndim != 3 or u8.shape[2] != 3 or u8.shape[0] == 0 or u8.shape[1] == 0:
        raise EncodeError(f"无法编码 JPEG：shape={u8.shape}")
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR), [int(cv2.IMWRITE_JPEG_QUALITY), int(q)])
    if not ok:
        raise EncodeError(f"JPEG 编码失败（q={q}）")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if dec is None:
        raise EncodeError("JPEG 解码失败")
    return cv2.cvtColor(dec, cv2.COLOR_BGR2RGB)


def jpeg_roundtrip(img: np.ndarray, q: int) -> np.ndarray:
    """
    以质量 q 做一次 JPEG 编解码（基线编码器默认设置）
    """
    if not 1 <= int(q) <= 100:
        raise UsageError(f"JPEG 质量必须在 [1, 100]，收到 {q}")
    u8 = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return _jpeg_u8(u8, q).astype(np.float32) / np.float32(255.0)


def apply_degradation(hq: np.ndarray, p: DegradationParams, seed: int, output_size: int) -> np.ndarray:
    """
    退化流程（顺序固定）：
    1. 高斯模糊（reflect 边界）
    2. 双线性下采样 r 倍
    3. 量化到 8-bit 后加高斯噪声（亮度噪声，三通道共用一次抽样），截断
    4. JPEG 编解码
    5. 双线性放大回 output_size
    """
    check_image(hq)
    h, w = hq.shape[:2]
    img = np.asarray(hq, dtype=np.float64)
    blurred = cv2.filter2D(img, -1, gaussian_kernel(p.rho), borderType=cv2.BORDER_REFLECT)
    lh, lw = downsample_size(h, p.r), downsample_size(w, p.r)
    low = blurred if (lh, lw) == (h, w) else cv2.resize(blurred, (lw, lh), interpolation=cv2.INTER_LINEAR)

    levels = np.round(np.clip(low, 0.0, 1.0) * 255.0)
    if p.sigma > 0:
        rng = np.random.default_rng(seed)
        levels = levels + rng.normal(0.0, float(p.sigma), size=(lh, lw, 1))
    u8 = np.clip(np.round(levels), 0, 255).astype(np.uint8)

    out = _jpeg_u8(u8, p.q).astype(np.float64) / 255.0
    if (lh, lw) != (output_size, output_size):
        out = cv2.resize(out, (output_size, output_size), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def degrade_image(hq: np.ndarray, seed: int, task: str | Task, output_size: int) -> Tuple[np.ndarray, DegradationParams]:
    """按种子抽取参数并退化；同一 seed 同时决定参数与噪声"""
    params = sample_params(seed, task)
    return apply_degradation(hq, params, derive_seed(seed, 1), output_size), params
