from __future__ import annotations

import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .config import LossWeights
from .errors import ShapeMismatchError


logger = logging.getLogger(__name__)

TAP_SEED = 20240117
TAP_CHANNELS: Tuple[int, ...] = (16, 32, 64, 64)

TapFn = Callable[[torch.Tensor], Sequence[torch.Tensor]]


class FeatureTaps(nn.Module):
    """
    固定种子初始化、冻结参数的 4 块卷积特征网络，输出 4 个中间层，
    用于感知损失与风格损失（任何返回 4 个特征图的可调用对象都可以替换它）
    """

    def __init__(self, seed: int = TAP_SEED, channels: Sequence[int] = TAP_CHANNELS):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        blocks = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.ReLU()))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FeatureTaps":
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps


def mse_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} 与 gt {tuple(gt.shape)} 形状不一致")
    return ((pred - gt) ** 2).mean()


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, phi: TapFn) -> torch.Tensor:
    """Σ_i mean((Φ_i(pred) − Φ_i(gt))²)"""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} 与 gt {tuple(gt.shape)} 形状不一致")
    return sum(((a - b) ** 2).mean() for a, b in zip(phi(pred), phi(gt)))


def gram(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, C)，不做归一化"""
    b, c = feat.shape[:2]
    f = feat.reshape(b, c, -1)
    return f @ f.transpose(1, 2)


def style_loss(pred: torch.Tensor, gt: torch.Tensor, phi: TapFn) -> torch.Tensor:
    """Σ_i ‖G_i(pred) − G_i(gt)‖² / (C_i·H_i·W_i)，对批取平均"""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} 与 gt {tuple(gt.shape)} 形状不一致")
    total = pred.new_zeros(())
    for a, b in zip(phi(pred), phi(gt)):
        _, c, h, w = a.shape
        diff = gram(a) - gram(b)
        total = total + (diff ** 2).sum(dim=(1, 2)).mean() / (c * h * w)
    return total


def hinge_terms(d_real: torch.Tensor, d_fake: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """判别器要最大化的两项：E[min(0, D(real) − 1)] 与 E[min(0, −1 − D(fake))]"""
    return torch.clamp(d_real - 1, max=0).mean(), torch.clamp(-1 - d_fake, max=0).mean()


def adversarial_losses(
    d_real: Optional[Mapping[int, torch.Tensor]],
    d_fake: Mapping[int, torch.Tensor],
    mode: str,
    weights: Optional[LossWeights] = None,
) -> torch.Tensor:
    """
    D 模式：返回 −Σ_r (hinge_real + hinge_fake)，最小化它即最大化判别目标
    G 模式：−Σ_r λ_{a,r}·E[D_r(fake)]
    """
    weights = weights or LossWeights()
    if mode == "D":
        if d_real is None:
            raise ShapeMismatchError("D 模式需要真实样本分数")
        total = 0.0
        for r, fake in d_fake.items():
            t_real, t_fake = hinge_terms(d_real[r], fake)
            total = total + t_real + t_fake
        return -total
    if mode == "G":
        return -sum(weights.lambda_adv[r] * fake.mean() for r, fake in d_fake.items())
    raise ValueError(f"未知模式：{mode}")


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    L = λ_mse·L_mse + λ_perc·L_perc + λ_style·L_style + L_G
    返回 (总损失, 各项明细)；明细里的值都是加权前的原始值
    """
    total = (
        weights.lambda_mse * terms["mse"]
        + weights.lambda_perc * terms["perceptual"]
        + weights.lambda_style * terms["style"]
        + terms["adv_g"]
    )
    breakdown = {k: float(torch.as_tensor(v).detach()) for k, v in terms.items()}
    breakdown["total"] = float(torch.as_tensor(total).detach())
    return total, breakdown


def reconstruction_loss(pred: torch.Tensor, gt: torch.Tensor, phi: TapFn, weights: LossWeights) -> torch.Tensor:
    """验证集用的重建损失 λ_mse·L_mse + λ_perc·L_perc"""
    return weights.lambda_mse * mse_loss(pred, gt) + weights.lambda_perc * perceptual_loss(pred, gt, phi)
