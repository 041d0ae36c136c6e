"""
通用字典 / 专属字典

字典文件格式（小端）：
    magic            4s   b"FDIC"
    version          u16  当前为 1
    kind             u8   0=generic 1=specific
    stage            u8   0=INIT 1=FORWARD 2=BACKWARD 3=FROZEN
    n_components     u8
    n_scales         u8
    entries_per_dict u32  Y 或 N
    total_entries    u32  entries_per_dict * n_components * n_scales
    key_dim          u16
    label_len        u16  随后 label_len 字节 UTF-8 身份标签（通用字典为 0）
    每个 (部件, 尺度) 一条形状记录：component_idx u8, scale u8, C u16, h u16, w u16
    正文：按形状记录顺序，先 keys（E*key_dim 个 f32），再 values（E*C*h*w 个 f32）
    crc32            u32  以上全部字节的 CRC32
"""
from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import COMPONENTS, KEY_DIM, RestorerConfig
from .errors import (
    ChecksumError,
    IdentityCollisionError,
    IllegalTransitionError,
    StageError,
    TooManyRefsError,
    VersionError,
)
from .imagedata import MAX_REFERENCES, LandmarkSet
from .storage import atomic_write_bytes


logger = logging.getLogger(__name__)

MAGIC = b"FDIC"
FORMAT_VERSION = 1
GAMMA_INIT = 0.99

DictKey = Tuple[str, int]  # (component, scale_factor)


class DictionaryKind(str, Enum):
    GENERIC = "generic"
    SPECIFIC = "specific"


class DictionaryStage(str, Enum):
    INIT = "INIT"
    FORWARD = "FORWARD"
    BACKWARD = "BACKWARD"
    FROZEN = "FROZEN"


STAGE_ORDER: Tuple[DictionaryStage, ...] = tuple(DictionaryStage)
_NEXT_STAGE = {a: b for a, b in zip(STAGE_ORDER, STAGE_ORDER[1:])}


@dataclass
class ComponentDictionary:
    component: str
    scale: int
    kind: DictionaryKind
    stage: DictionaryStage
    keys: torch.Tensor  # (E, 64)
    values: torch.Tensor  # (E, C, h, w)

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    @property
    def value_shape(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def detached(self, requires_grad: bool = False) -> "ComponentDictionary":
        keys = self.keys.detach().clone()
        values = self.values.detach().clone()
        if requires_grad:
            keys, values = nn.Parameter(keys), nn.Parameter(values)
        return ComponentDictionary(self.component, self.scale, self.kind, self.stage, keys, values)

    def canonical(self) -> "ComponentDictionary":
        """按 key 字典序重排条目，使读取结果与条目顺序无关"""
        if len(self) < 2:
            return self
        k = self.keys.detach().cpu().numpy()
        order = np.lexsort(k.T[::-1])
        idx = torch.as_tensor(order, dtype=torch.long, device=self.keys.device)
        return ComponentDictionary(
            self.component, self.scale, self.kind, self.stage,
            self.keys.index_select(0, idx), self.values.index_select(0, idx),
        )


@dataclass
class DictionaryBank:
    """一组 (部件, 尺度) 字典"""
    kind: DictionaryKind
    stage: DictionaryStage
    dicts: Dict[DictKey, ComponentDictionary] = field(default_factory=dict)
    identity: Optional[str] = None

    def __getitem__(self, key: DictKey) -> ComponentDictionary:
        return self.dicts[key]

    def __contains__(self, key: DictKey) -> bool:
        return key in self.dicts

    @property
    def scales(self) -> Tuple[int, ...]:
        return tuple(sorted({s for _, s in self.dicts}))

    @property
    def entries_per_dict(self) -> int:
        return len(next(iter(self.dicts.values()))) if self.dicts else 0

    @property
    def total_entries(self) -> int:
        return sum(len(d) for d in self.dicts.values())

    @property
    def is_empty(self) -> bool:
        return self.entries_per_dict == 0

    def snapshot(self, stage: Optional[DictionaryStage] = None, requires_grad: bool = False) -> "DictionaryBank":
        stage = stage or self.stage
        dicts = {}
        for k, d in self.dicts.items():
            nd = d.detached(requires_grad)
            nd.stage = stage
            dicts[k] = nd
        return DictionaryBank(self.kind, stage, dicts, self.identity)

    def entry_tensors(self) -> List[torch.Tensor]:
        out: List[torch.Tensor] = []
        for d in self.dicts.values():
            out.extend([d.keys, d.values])
        return out

    def permuted(self, perm: Sequence[int]) -> "DictionaryBank":
        idx = torch.as_tensor(list(perm), dtype=torch.long)
        dicts = {
            k: ComponentDictionary(d.component, d.scale, d.kind, d.stage, d.keys[idx], d.values[idx])
            for k, d in self.dicts.items()
        }
        return DictionaryBank(self.kind, self.stage, dicts, self.identity)

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()


def _ordered_keys(scales: Sequence[int]) -> List[DictKey]:
    return [(c, s) for c in COMPONENTS for s in sorted(scales)]


def _bank_from_features(
    features: Dict[DictKey, Tuple[torch.Tensor, torch.Tensor]],
    kind: DictionaryKind,
    stage: DictionaryStage,
    identity: Optional[str] = None,
) -> DictionaryBank:
    dicts = {
        k: ComponentDictionary(k[0], k[1], kind, stage, keys, values)
        for k, (keys, values) in features.items()
    }
    return DictionaryBank(kind, stage, dicts, identity)


# -----------------------------
# 通用字典
# -----------------------------
def init_generic(
    extractor: nn.Module,
    images: torch.Tensor,
    landmarks: Sequence[LandmarkSet],
    identity_ids: Sequence[str],
) -> DictionaryBank:
    """
    用 Y 张不同身份的 HQ 图像初始化通用字典（INIT 阶段：条目是提取器的实时输出，梯度可回传）
    """
    if len(set(identity_ids)) != len(identity_ids):
        dup = sorted({i for i in identity_ids if list(identity_ids).count(i) > 1})
        raise IdentityCollisionError(f"通用字典图像身份重复：{dup[:5]}")
    feats = extractor(images, list(landmarks))
    return _bank_from_features(feats, DictionaryKind.GENERIC, DictionaryStage.INIT)


def random_generic(config: RestorerConfig, seed: int, extractor: nn.Module) -> DictionaryBank:
    """随机噪声初始化的通用字典（只靠反向更新学习）"""
    g = torch.Generator().manual_seed(seed)
    feats = {}
    for comp, sf in _ordered_keys(config.transform_scales()):
        shape = extractor.value_shape(comp, sf)
        keys = torch.randn(config.dict_size, KEY_DIM, generator=g)
        values = 0.1 * torch.randn(config.dict_size, *shape, generator=g)
        feats[(comp, sf)] = (keys, values)
    return _bank_from_features(feats, DictionaryKind.GENERIC, DictionaryStage.INIT)


def forward_update(
    d: ComponentDictionary,
    gt_key: torch.Tensor,
    gt_value: torch.Tensor,
    gamma_k: torch.Tensor | float,
    gamma_v: torch.Tensor | float,
) -> ComponentDictionary:
    """
    动量更新与 gt_key 余弦相似度最高的那一个条目（并列取最小下标），其余条目不变
    """
    if d.kind != DictionaryKind.GENERIC or d.stage != DictionaryStage.FORWARD:
        raise StageError(f"forward_update 只能用于 FORWARD 阶段的通用字典（当前 {d.kind.value}/{d.stage.value}）")
    sims = F.cosine_similarity(d.keys.detach(), gt_key.detach().unsqueeze(0), dim=1)
    y = int(torch.argmax(sims))
    keys = d.keys.clone()
    values = d.values.clone()
    keys[y] = gamma_k * d.keys[y] + (1 - gamma_k) * gt_key
    values[y] = gamma_v * d.values[y] + (1 - gamma_v) * gt_value
    return ComponentDictionary(d.component, d.scale, d.kind, d.stage, keys, values)


def advance_stage(bank: DictionaryBank, target: DictionaryStage) -> DictionaryBank:
    """
    阶段切换，只允许 INIT -> FORWARD -> BACKWARD -> FROZEN：
    - FORWARD：与提取器断开的快照
    - BACKWARD：条目变为独立的可训练参数
    - FROZEN：常量
    """
    target = DictionaryStage(target)
    if _NEXT_STAGE.get(bank.stage) != target:
        raise IllegalTransitionError(f"非法阶段切换：{bank.stage.value} -> {target.value}")
    logger.info("字典阶段：%s -> %s", bank.stage.value, target.value)
    return bank.snapshot(target, requires_grad=(target == DictionaryStage.BACKWARD))


class GenericMemory(nn.Module):
    """
    训练期持有通用字典：当前阶段、当前条目以及每个 (部件, 尺度) 的 γ_k / γ_v
    """

    def __init__(self, config: RestorerConfig):
        super().__init__()
        logit = float(np.log(GAMMA_INIT / (1 - GAMMA_INIT)))
        self.gamma_logits = nn.ParameterDict()
        for comp, sf in _ordered_keys(config.transform_scales()):
            self.gamma_logits[f"{comp}_{sf}"] = nn.Parameter(torch.full((2,), logit))
        self.stage = DictionaryStage.INIT
        self.bank: Optional[DictionaryBank] = None

    def gammas(self, key: DictKey) -> Tuple[torch.Tensor, torch.Tensor]:
        g = torch.sigmoid(self.gamma_logits[f"{key[0]}_{key[1]}"])
        return g[0], g[1]

    def set_bank(self, bank: DictionaryBank) -> None:
        self.bank = bank
        self.stage = bank.stage

    def advance(self, target: DictionaryStage) -> None:
        if self.bank is None:
            raise StageError("尚未初始化通用字典")
        self.set_bank(advance_stage(self.bank, target))

    def apply_forward_updates(self, bank: DictionaryBank, gt_features: Dict[DictKey, Tuple[torch.Tensor, torch.Tensor]]) -> DictionaryBank:
        """按批次顺序逐样本做前向更新，返回更新后的字典（保留到 γ 与提取器的梯度）"""
        dicts = dict(bank.dicts)
        for key, (gt_keys, gt_values) in gt_features.items():
            gk, gv = self.gammas(key)
            d = dicts[key]
            for b in range(gt_keys.shape[0]):
                d = forward_update(d, gt_keys[b], gt_values[b], gk, gv)
            dicts[key] = d
        return DictionaryBank(bank.kind, bank.stage, dicts, bank.identity)


# -----------------------------
# 专属字典
# -----------------------------
def build_specific(
    extractor: nn.Module,
    ref_images: Optional[torch.Tensor],
    ref_landmarks: Sequence[LandmarkSet],
    identity: Optional[str] = None,
) -> DictionaryBank:
    """
    由同一身份的 N 张参考图动态构建专属字典；N=0 得到形状正确的空字典
    """
    n = 0 if ref_images is None else int(ref_images.shape[0])
    if n > MAX_REFERENCES:
        raise TooManyRefsError(f"参考图最多 {MAX_REFERENCES} 张，收到 {n}")
    if n == 0:
        feats = {
            (comp, sf): (torch.zeros(0, KEY_DIM), torch.zeros(0, *extractor.value_shape(comp, sf)))
            for comp, sf in _ordered_keys(extractor.scales)
        }
    else:
        feats = extractor(ref_images, list(ref_landmarks))
    return _bank_from_features(feats, DictionaryKind.SPECIFIC, DictionaryStage.INIT, identity)


# -----------------------------
# 序列化
# -----------------------------
_HEAD = struct.Struct("<4sHBBBBIIHH")
_SHAPE = struct.Struct("<BBHHH")
_KIND_CODES = {DictionaryKind.GENERIC: 0, DictionaryKind.SPECIFIC: 1}
_STAGE_CODES = {s: i for i, s in enumerate(STAGE_ORDER)}


def _f32(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype("<f4").tobytes()


def serialize(bank: DictionaryBank) -> bytes:
    keys = _ordered_keys(bank.scales)
    missing = [k for k in keys if k not in bank.dicts]
    if missing:
        raise StageError(f"字典缺少 (部件, 尺度)：{missing}")
    label = (bank.identity or "").encode("utf-8")
    e = bank.entries_per_dict
    parts = [
        _HEAD.pack(
            MAGIC, FORMAT_VERSION, _KIND_CODES[bank.kind], _STAGE_CODES[bank.stage],
            len(COMPONENTS), len(bank.scales), e, e * len(keys), KEY_DIM, len(label),
        ),
        label,
    ]
    for comp, sf in keys:
        c, h, w = bank[(comp, sf)].value_shape
        parts.append(_SHAPE.pack(COMPONENTS.index(comp), sf, c, h, w))
    for k in keys:
        d = bank[k]
        if len(d) != e:
            raise StageError(f"{k} 条目数 {len(d)} 与其它字典 {e} 不一致")
        parts.append(_f32(d.keys))
        parts.append(_f32(d.values))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def read_header(data: bytes) -> Dict:
    if len(data) < _HEAD.size + 4 or data[:4] != MAGIC:
        raise ChecksumError("不是字典文件或文件已截断")
    magic, version, kind, stage, n_comp, n_scales, e, total, d_k, label_len = _HEAD.unpack_from(data, 0)
    return {
        "version": version,
        "kind": kind,
        "stage": stage,
        "n_components": n_comp,
        "n_scales": n_scales,
        "entries_per_dict": e,
        "total_entries": total,
        "key_dim": d_k,
        "label_len": label_len,
    }


def deserialize(data: bytes) -> DictionaryBank:
    header = read_header(data)
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("字典文件校验失败（截断或损坏）")
    if header["version"] != FORMAT_VERSION:
        raise VersionError(f"不支持的字典版本：{header['version']}（当前 {FORMAT_VERSION}）")
    try:
        kind = [k for k, v in _KIND_CODES.items() if v == header["kind"]][0]
        stage = STAGE_ORDER[header["stage"]]
        off = _HEAD.size
        label = data[off:off + header["label_len"]].decode("utf-8")
        off += header["label_len"]
        shapes = []
        for _ in range(header["n_components"] * header["n_scales"]):
            ci, sf, c, h, w = _SHAPE.unpack_from(data, off)
            off += _SHAPE.size
            shapes.append((COMPONENTS[ci], sf, (c, h, w)))
        e, d_k = header["entries_per_dict"], header["key_dim"]
        dicts: Dict[DictKey, ComponentDictionary] = {}
        for comp, sf, shape in shapes:
            nk = e * d_k
            keys = np.frombuffer(data, dtype="<f4", count=nk, offset=off).reshape(e, d_k)
            off += 4 * nk
            nv = e * int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f4", count=nv, offset=off).reshape(e, *shape)
            off += 4 * nv
            dicts[(comp, sf)] = ComponentDictionary(
                comp, sf, kind, stage,
                torch.from_numpy(keys.astype(np.float32)), torch.from_numpy(values.astype(np.float32)),
            )
    except (struct.error, ValueError, IndexError) as e:
        raise ChecksumError("字典文件结构损坏") from e
    if off != len(data) - 4:
        raise ChecksumError("字典文件长度与头部不符")
    bank = DictionaryBank(kind, stage, dicts, label or None)
    if stage == DictionaryStage.BACKWARD:
        bank = bank.snapshot(requires_grad=True)
    return bank


def save_dictionary(bank: DictionaryBank, path) -> None:
    atomic_write_bytes(path, serialize(bank))


def load_dictionary(path) -> DictionaryBank:
    with open(path, "rb") as f:
        return deserialize(f.read())
