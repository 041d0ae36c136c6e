from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .config import COMPONENTS, RestorerConfig
from .dictionary import KEY_DIM, ComponentDictionary, DictionaryBank
from .errors import BoundsError, EmptyDictionaryError, ShapeMismatchError
from .imagedata import ComponentROI


logger = logging.getLogger(__name__)

LEAK = 0.2


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"形状不一致：{sorted(shapes)}")


def _check_box(box: Sequence[float], height: int, width: int) -> None:
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise BoundsError(f"ROI {tuple(box)} 超出特征图范围 {width}×{height}")


# -----------------------------
# RoI 提取 / 回贴
# -----------------------------
def roi_align_extract(feat: torch.Tensor, boxes: Sequence[Sequence[float]], out_size: Tuple[int, int]) -> torch.Tensor:
    """
    feat: (B, C, H, W)；boxes: 每个样本一个 (x0, y0, x1, y1)，特征图坐标
    像素 i 覆盖 [i, i+1)，用 aligned=True 的 RoIAlign 双线性采样到 out_size
    """
    b, _, h, w = feat.shape
    if len(boxes) != b:
        raise ShapeMismatchError(f"boxes 数量 {len(boxes)} 与批大小 {b} 不符")
    for box in boxes:
        _check_box(box, h, w)
    rois = torch.tensor([[i, *box] for i, box in enumerate(boxes)], dtype=feat.dtype, device=feat.device)
    return roi_align(feat, rois, output_size=out_size, spatial_scale=1.0, sampling_ratio=-1, aligned=True)


def _coverage(lo: float, hi: float, start: int, stop: int) -> torch.Tensor:
    """像素 [i, i+1) 与 [lo, hi) 的重叠长度，i = start..stop-1"""
    px = torch.arange(start, stop, dtype=torch.float64)
    return ((px + 1).clamp(max=hi) - px.clamp(min=lo)).clamp(min=0.0)


def reverse_roi_paste(feat: torch.Tensor, boxes: Sequence[Sequence[float]], enhanced: torch.Tensor) -> torch.Tensor:
    """
    反向 RoIAlign：ROI 覆盖的每个像素中心映射回部件特征坐标做双线性采样，
    按像素被 ROI 覆盖的面积比例与原特征混合；完全不被覆盖的像素不变
    """
    b, _, h, w = feat.shape
    if enhanced.shape[0] != b or enhanced.shape[1] != feat.shape[1]:
        raise ShapeMismatchError(f"回贴特征 {tuple(enhanced.shape)} 与特征图 {tuple(feat.shape)} 不匹配")
    out = []
    for i, box in enumerate(boxes):
        _check_box(box, h, w)
        bx0, by0, bx1, by1 = (float(v) for v in box)
        x0, y0 = int(math.floor(bx0)), int(math.floor(by0))
        x1, y1 = int(math.ceil(bx1)), int(math.ceil(by1))
        # 像素中心 -> [-1, 1]（align_corners=False 时 -1/1 是部件特征的外边缘）
        gx = 2 * (torch.arange(x0, x1, dtype=torch.float64) + 0.5 - bx0) / (bx1 - bx0) - 1
        gy = 2 * (torch.arange(y0, y1, dtype=torch.float64) + 0.5 - by0) / (by1 - by0) - 1
        grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1)[None].to(feat.dtype).to(feat.device)
        sampled = F.grid_sample(enhanced[i:i + 1], grid, mode="bilinear", padding_mode="border", align_corners=False)
        cov = torch.outer(_coverage(by0, by1, y0, y1), _coverage(bx0, bx1, x0, x1)).to(feat.dtype).to(feat.device)
        alpha = F.pad(cov, (x0, w - x1, y0, h - y1))[None, None]
        pasted = F.pad(sampled, (x0, w - x1, y0, h - y1))
        out.append(feat[i:i + 1] * (1 - alpha) + pasted * alpha)
    return torch.cat(out, dim=0)


# -----------------------------
# 查询 / 读取
# -----------------------------
class QueryHead(nn.Module):
    """两个卷积块 + 全局平均池化 + 线性映射到 64 维"""

    def __init__(self, channels: int, key_dim: int = KEY_DIM):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(LEAK),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(LEAK),
        )
        self.proj = nn.Linear(channels, key_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.proj(self.body(f).mean(dim=(2, 3)))


def make_query(f: torch.Tensor, head: QueryHead) -> torch.Tensor:
    return head(f)


def attention_weights(q: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """softmax(q·k / √64)，q: (B, 64)，keys: (E, 64) -> (B, E)"""
    return torch.softmax(q @ keys.t() / math.sqrt(KEY_DIM), dim=1)


def dictionary_read(
    q: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mode: str = "attention",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    注意力读取：输出为各条目 value 的加权和
    best_match：前向取得分最高条目的 value，反向用直通估计（梯度按 softmax 权重）
    """
    if keys.shape[0] == 0:
        raise EmptyDictionaryError("字典为空，无法读取")
    if keys.shape[1] != q.shape[1] or keys.shape[0] != values.shape[0]:
        raise ShapeMismatchError(f"query {tuple(q.shape)} / keys {tuple(keys.shape)} / values {tuple(values.shape)} 不匹配")
    w = attention_weights(q, keys)
    soft = torch.einsum("be,echw->bchw", w, values)
    if mode == "attention":
        return soft, w
    idx = torch.argmax(q @ keys.t(), dim=1)
    hard = values.index_select(0, idx)
    one_hot = F.one_hot(idx, keys.shape[0]).to(w.dtype)
    return hard + (soft - soft.detach()), one_hot


def read_component(q: torch.Tensor, d: ComponentDictionary, mode: str = "attention") -> Tuple[torch.Tensor, torch.Tensor]:
    return dictionary_read(q, d.keys, d.values, mode)


# -----------------------------
# 融合
# -----------------------------
def identity_fuse(g_read: torch.Tensor, s_read: torch.Tensor, m_id: torch.Tensor) -> torch.Tensor:
    """M_Id·s + (1 − M_Id)·g"""
    _check_same_shape(g_read, s_read)
    return m_id * s_read + (1 - m_id) * g_read


class IdentityFusion(nn.Module):
    """池化拼接 (f_lq, g, s) -> MLP -> sigmoid，得到每个样本一个身份分数 M_Id"""

    def __init__(self, channels: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3 * channels, channels),
            nn.LeakyReLU(LEAK),
            nn.Linear(channels, 1),
        )

    def score(self, f_lq: torch.Tensor, g_read: torch.Tensor, s_read: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([t.mean(dim=(2, 3)) for t in (f_lq, g_read, s_read)], dim=1)
        return torch.sigmoid(self.mlp(pooled)).view(-1, 1, 1, 1)

    def forward(
        self,
        f_lq: torch.Tensor,
        g_read: torch.Tensor,
        s_read: Optional[torch.Tensor],
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        _check_same_shape(f_lq, g_read)
        if s_read is None:
            return g_read, None
        _check_same_shape(f_lq, s_read)
        m = self.score(f_lq, g_read, s_read)
        return identity_fuse(g_read, s_read, m), m


def confidence_combine(f_lq: torch.Tensor, f_read: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return f_lq + f_read * c


class ConfidenceHead(nn.Module):
    """由残差 (f_read − f_lq) 经两层卷积 + sigmoid 得到逐元素置信度"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, residual: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv2(F.leaky_relu(self.conv1(residual), LEAK)))


def confidence_fuse(f_lq: torch.Tensor, f_read: torch.Tensor, head: ConfidenceHead) -> torch.Tensor:
    _check_same_shape(f_lq, f_read)
    return confidence_combine(f_lq, f_read, head(f_read - f_lq))


# -----------------------------
# SFT
# -----------------------------
def sft_affine(decoder_feat: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return alpha * decoder_feat + beta


class SFTLayer(nn.Module):
    """由融合后的 skip 特征预测逐元素 (α, β)，α = 1 + head(skip)"""

    def __init__(self, skip_channels: int, feat_channels: int):
        super().__init__()

        def head() -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(skip_channels, skip_channels, 3, padding=1),
                nn.LeakyReLU(LEAK),
                nn.Conv2d(skip_channels, feat_channels, 3, padding=1),
            )

        self.alpha = head()
        self.beta = head()

    def forward(self, decoder_feat: torch.Tensor, fused_skip: torch.Tensor) -> torch.Tensor:
        return sft_modulate(decoder_feat, fused_skip, self)


def sft_modulate(decoder_feat: torch.Tensor, fused_skip: torch.Tensor, layer: SFTLayer) -> torch.Tensor:
    if decoder_feat.shape[-2:] != fused_skip.shape[-2:] or decoder_feat.shape[0] != fused_skip.shape[0]:
        raise ShapeMismatchError(f"SFT 空间尺寸不一致：{tuple(decoder_feat.shape)} vs {tuple(fused_skip.shape)}")
    return sft_affine(decoder_feat, 1 + layer.alpha(fused_skip), layer.beta(fused_skip))


# -----------------------------
# 字典变换模块
# -----------------------------
class DictionaryTransform(nn.Module):
    """
    单个尺度上的 skip 变换：对每个部件
    RoIAlign 提取 -> 生成 query -> 读通用/专属字典 -> 身份融合 -> 置信度融合 -> 回贴
    回贴顺序固定为 left_eye, right_eye, nose, mouth（后者覆盖前者）
    """

    def __init__(self, config: RestorerConfig, scale_factor: int):
        super().__init__()
        self.scale_factor = scale_factor
        self.read_mode = config.read_mode
        self.sizes = {c: config.canonical_size(c, scale_factor) for c in COMPONENTS}
        ch = config.channels(scale_factor)
        self.query = nn.ModuleDict({c: QueryHead(ch, config.key_dim) for c in COMPONENTS})
        self.fusion = nn.ModuleDict({c: IdentityFusion(ch) for c in COMPONENTS})
        self.confidence = nn.ModuleDict({c: ConfidenceHead(ch) for c in COMPONENTS})

    def _read_specific(
        self,
        q: torch.Tensor,
        key: Tuple[str, int],
        specific: Sequence[Optional[DictionaryBank]],
    ) -> Tuple[List[Optional[torch.Tensor]], List[Optional[torch.Tensor]]]:
        reads: List[Optional[torch.Tensor]] = []
        weights: List[Optional[torch.Tensor]] = []
        for b, bank in enumerate(specific):
            if bank is None or bank.is_empty or key not in bank:
                reads.append(None)
                weights.append(None)
                continue
            out, w = read_component(q[b:b + 1], bank[key].canonical(), self.read_mode)
            reads.append(out)
            weights.append(w[0])
        return reads, weights

    def forward(
        self,
        feat: torch.Tensor,
        rois: Sequence[Dict[str, ComponentROI]],
        generic: Optional[DictionaryBank],
        specific: Optional[Sequence[Optional[DictionaryBank]]] = None,
        dump: Optional[Dict] = None,
    ) -> torch.Tensor:
        batch = feat.shape[0]
        specific = list(specific) if specific is not None else [None] * batch
        out = feat
        for comp in COMPONENTS:
            key = (comp, self.scale_factor)
            boxes = [r[comp].box for r in rois]
            f_lq = roi_align_extract(feat, boxes, self.sizes[comp])
            q = make_query(f_lq, self.query[comp])

            if generic is not None and key in generic and not generic.is_empty:
                g_read, g_w = read_component(q, generic[key], self.read_mode)
            else:
                g_read, g_w = torch.zeros_like(f_lq), None
            s_reads, s_ws = self._read_specific(q, key, specific)

            if all(s is None for s in s_reads):
                fused, m_id = self.fusion[comp](f_lq, g_read, None)
            else:
                s_stack = torch.cat([s if s is not None else g_read[b:b + 1] for b, s in enumerate(s_reads)], dim=0)
                mixed, m_id = self.fusion[comp](f_lq, g_read, s_stack)
                has_s = torch.tensor([s is not None for s in s_reads], device=feat.device).view(-1, 1, 1, 1)
                fused = torch.where(has_s, mixed, g_read)

            enhanced = confidence_fuse(f_lq, fused, self.confidence[comp])
            out = reverse_roi_paste(out, boxes, enhanced)

            if dump is not None:
                for b in range(batch):
                    rec = dump.setdefault(b, {}).setdefault(f"{comp}@{self.scale_factor}", {})
                    rec["generic_weights"] = g_w[b].detach().tolist() if g_w is not None else None
                    rec["specific_weights"] = s_ws[b].detach().tolist() if s_ws[b] is not None else None
                    rec["m_id"] = float(m_id[b].detach()) if (m_id is not None and s_reads[b] is not None) else None
        return out
