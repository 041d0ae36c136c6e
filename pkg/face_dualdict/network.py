from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .config import COMPONENTS, RestorerConfig
from .dictionary import KEY_DIM, DictionaryBank, GenericMemory, build_specific
from .errors import MissingDictionaryError, SizeError
from .imagedata import LandmarkSet, landmarks_to_rois, template_landmarks, to_image, to_tensor
from .transform import LEAK, DictionaryTransform, SFTLayer, roi_align_extract


logger = logging.getLogger(__name__)

DISCRIMINATOR_SCALES: Tuple[int, ...] = (1, 2, 4)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(LEAK))


@dataclass
class FeaturePyramid:
    levels: List[Tuple[int, torch.Tensor]]  # [(scale_factor, (B, C, H/sf, W/sf)), ...]，由细到粗

    def __getitem__(self, scale_factor: int) -> torch.Tensor:
        for sf, t in self.levels:
            if sf == scale_factor:
                return t
        raise KeyError(scale_factor)

    @property
    def scale_factors(self) -> Tuple[int, ...]:
        return tuple(sf for sf, _ in self.levels)


class Encoder(nn.Module):
    """步长卷积编码器，无归一化层；输出 scale 2, 4, ..., 2^S 的特征"""

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        c0 = config.base_channels * config.channel_multiplier
        self.stem = _conv_block(3, c0)
        self.down = nn.ModuleList()
        cin = c0
        for sf in config.scale_factors:
            cout = config.channels(sf)
            self.down.append(nn.Sequential(_conv_block(cin, cout, stride=2), _conv_block(cout, cout)))
            cin = cout

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        h = self.stem(x)
        levels = []
        for sf, block in zip(self.config.scale_factors, self.down):
            h = block(h)
            levels.append((sf, h))
        return FeaturePyramid(levels)


def encode(encoder: Encoder, img: torch.Tensor) -> FeaturePyramid:
    size = encoder.config.input_size
    if tuple(img.shape[-2:]) != (size, size):
        raise SizeError(f"输入尺寸 {tuple(img.shape[-2:])} 与配置 {size}×{size} 不符")
    return encoder(img)


def image_rois(landmarks: Sequence[LandmarkSet], config: RestorerConfig, scale_factor: int) -> List[Dict]:
    return [
        landmarks_to_rois(lm, config.input_size, scale_factor, config.coarsest_factor, config.component_sizes)
        for lm in landmarks
    ]


class FeatureExtractor(nn.Module):
    """
    字典特征提取器：编码器 + 每个 (部件, 尺度) 的 key 头（池化 + 线性到 64 维）与 value 头（卷积）
    """

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        self.scales: Tuple[int, ...] = tuple(sorted(config.transform_scales()))
        self.encoder = Encoder(config)
        self.key_heads = nn.ModuleDict()
        self.value_heads = nn.ModuleDict()
        for comp in COMPONENTS:
            for sf in self.scales:
                ch = config.channels(sf)
                self.key_heads[f"{comp}_{sf}"] = nn.Linear(ch, KEY_DIM)
                self.value_heads[f"{comp}_{sf}"] = nn.Conv2d(ch, ch, 3, padding=1)

    def value_shape(self, component: str, scale_factor: int) -> Tuple[int, int, int]:
        return (self.config.channels(scale_factor), *self.config.canonical_size(component, scale_factor))

    def forward(self, images: torch.Tensor, landmarks: Sequence[LandmarkSet]) -> Dict[Tuple[str, int], Tuple[torch.Tensor, torch.Tensor]]:
        pyramid = encode(self.encoder, images)
        out: Dict[Tuple[str, int], Tuple[torch.Tensor, torch.Tensor]] = {}
        for comp in COMPONENTS:
            for sf in self.scales:
                boxes = [r[comp].box for r in image_rois(landmarks, self.config, sf)]
                f = roi_align_extract(pyramid[sf], boxes, self.config.canonical_size(comp, sf))
                name = f"{comp}_{sf}"
                out[(comp, sf)] = (self.key_heads[name](f.mean(dim=(2, 3))), self.value_heads[name](f))
        return out


class Restorer(nn.Module):
    """
    改造的 U-Net：编码 -> 瓶颈 -> 由粗到细逐尺度解码；
    每个 skip 先经字典变换（若该尺度启用），再用 SFT 调制解码特征
    """

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        coarse = config.coarsest_factor
        self.bottleneck = nn.Sequential(_conv_block(config.channels(coarse), config.channels(coarse)),
                                        _conv_block(config.channels(coarse), config.channels(coarse)))
        self.transforms = nn.ModuleDict({str(sf): DictionaryTransform(config, sf) for sf in config.transform_scales()})
        self.sft = nn.ModuleDict()
        self.decode = nn.ModuleDict()
        self.up = nn.ModuleDict()
        c0 = config.base_channels * config.channel_multiplier
        for sf in config.scale_factors:
            ch = config.channels(sf)
            finer = config.channels(sf // 2) if sf > 2 else c0
            self.sft[str(sf)] = SFTLayer(ch, ch)
            self.decode[str(sf)] = _conv_block(ch, ch)
            self.up[str(sf)] = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _conv_block(ch, finer))
        self.head = nn.Sequential(_conv_block(c0, c0), nn.Conv2d(c0, 3, 3, padding=1))

    def forward(
        self,
        lq: torch.Tensor,
        landmarks: Sequence[LandmarkSet],
        generic: Optional[DictionaryBank] = None,
        specific: Optional[Sequence[Optional[DictionaryBank]]] = None,
        dump: Optional[Dict] = None,
    ) -> torch.Tensor:
        pyramid = encode(self.encoder, lq)
        d = self.bottleneck(pyramid[self.config.coarsest_factor])
        for sf in reversed(self.config.scale_factors):
            skip = pyramid[sf]
            if str(sf) in self.transforms:
                rois = image_rois(landmarks, self.config, sf)
                skip = self.transforms[str(sf)](skip, rois, generic, specific, dump)
            d = self.sft[str(sf)](d, skip)
            d = self.up[str(sf)](self.decode[str(sf)](d))
        return (torch.tanh(self.head(d)) + 1) / 2


class FaceRestorationModel(nn.Module):
    """复原网络 + 通用/专属特征提取器 + 通用字典（训练期状态）"""

    def __init__(self, config: RestorerConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.restorer = Restorer(config)
        self.generic_extractor = FeatureExtractor(config)
        self.specific_extractor = copy.deepcopy(self.generic_extractor)
        self.memory = GenericMemory(config)

    def sync_specific_from_generic(self) -> None:
        self.specific_extractor.load_state_dict(self.generic_extractor.state_dict())

    def forward(self, lq, landmarks, generic=None, specific=None, dump=None) -> torch.Tensor:
        if not self.config.use_generic:
            generic = None
        if not self.config.use_specific:
            specific = None
        return self.restorer(lq, landmarks, generic, specific, dump)


def extract_dictionary_features(
    model: FaceRestorationModel,
    img: np.ndarray,
    lm: LandmarkSet,
    which: str = "generic",
) -> Dict[Tuple[str, int], Tuple[torch.Tensor, torch.Tensor]]:
    """单张 HQ 图的 (部件, 尺度) -> (key (64,), value (C, h, w))"""
    if which not in ("generic", "specific"):
        raise ValueError(f"which 只能是 generic 或 specific，收到 {which}")
    extractor = model.generic_extractor if which == "generic" else model.specific_extractor
    feats = extractor(to_tensor(img)[None], [lm])
    return {k: (keys[0], values[0]) for k, (keys, values) in feats.items()}


def specific_bank_from_refs(
    model: FaceRestorationModel,
    refs: Sequence[Tuple[np.ndarray, LandmarkSet]],
    identity: Optional[str] = None,
) -> DictionaryBank:
    images = torch.stack([to_tensor(img) for img, _ in refs]) if refs else None
    return build_specific(model.specific_extractor, images, [lm for _, lm in refs], identity)


def restore_image(
    model: FaceRestorationModel,
    lq: np.ndarray,
    lm: Optional[LandmarkSet],
    generic: Optional[DictionaryBank],
    specific: Optional[DictionaryBank] = None,
    dump: Optional[Dict] = None,
) -> np.ndarray:
    """
    单张复原；专属字典为空与缺省等价（只走通用字典路径）
    """
    cfg = model.config
    if lq.shape[:2] != (cfg.input_size, cfg.input_size):
        raise SizeError(f"输入尺寸 {lq.shape[1]}×{lq.shape[0]} 与模型 {cfg.input_size}×{cfg.input_size} 不符")
    if cfg.use_generic and cfg.transform_scales() and generic is None:
        raise MissingDictionaryError("缺少通用字典")
    if specific is not None and specific.is_empty:
        specific = None
    lm = lm or template_landmarks(cfg.input_size)
    model.eval()
    with torch.no_grad():
        out = model(to_tensor(lq)[None], [lm], generic, [specific], dump)
    return to_image(out[0])


# -----------------------------
# 判别器
# -----------------------------
def _sn_conv(cin: int, cout: int, kernel: int, stride: int, padding: int) -> nn.Module:
    return spectral_norm(nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding))


class PatchDiscriminator(nn.Module):
    """4 层谱归一化卷积，输出空间平均后的实数分数"""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.body = nn.Sequential(
            _sn_conv(3, c, 4, 2, 1), nn.LeakyReLU(LEAK),
            _sn_conv(c, 2 * c, 4, 2, 1), nn.LeakyReLU(LEAK),
            _sn_conv(2 * c, 4 * c, 4, 2, 1), nn.LeakyReLU(LEAK),
            _sn_conv(4 * c, 1, 3, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(1, 2, 3))


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, base_channels: int = 32, scales: Sequence[int] = DISCRIMINATOR_SCALES):
        super().__init__()
        self.scales = tuple(scales)
        self.nets = nn.ModuleDict({str(r): PatchDiscriminator(base_channels) for r in self.scales})

    def discriminate(self, img: torch.Tensor, r: int) -> torch.Tensor:
        x = F.avg_pool2d(img, r) if r > 1 else img
        return self.nets[str(r)](x)

    def forward(self, img: torch.Tensor) -> Dict[int, torch.Tensor]:
        return {r: self.discriminate(img, r) for r in self.scales}
