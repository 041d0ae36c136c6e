from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

from dotenv import dotenv_values

from .errors import ConfigError


COMPONENTS: Tuple[str, ...] = ("left_eye", "right_eye", "nose", "mouth")

# 最粗尺度上的规范尺寸 (h, w)，每细一级翻倍
BASE_COMPONENT_SIZES: Dict[str, Tuple[int, int]] = {
    "left_eye": (8, 16),
    "right_eye": (8, 16),
    "nose": (16, 16),
    "mouth": (8, 16),
}

READ_MODES = ("attention", "best_match")

KEY_DIM = 64


@dataclass
class RestorerConfig:
    base_channels: int = 32
    num_scales: int = 3
    dict_size: int = 128  # Y
    input_size: int = 64
    key_dim: int = KEY_DIM  # 字典格式与查询头固定为 64
    channel_multiplier: int = 1
    use_generic: bool = True
    use_specific: bool = True
    read_mode: str = "attention"
    # 仅最粗的 k 个尺度带字典变换模块；None 表示全部
    transform_count: Optional[int] = None
    component_sizes: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(BASE_COMPONENT_SIZES))

    @property
    def scale_factors(self) -> Tuple[int, ...]:
        return tuple(2 ** (i + 1) for i in range(self.num_scales))

    @property
    def coarsest_factor(self) -> int:
        return 2 ** self.num_scales

    @property
    def dictionaries_enabled(self) -> bool:
        return self.dict_size > 0 and (self.use_generic or self.use_specific)

    def channels(self, scale_factor: int) -> int:
        level = scale_factor.bit_length() - 2  # 2 -> 0, 4 -> 1, 8 -> 2
        return self.base_channels * self.channel_multiplier * (2 ** level)

    def canonical_size(self, component: str, scale_factor: int) -> Tuple[int, int]:
        h, w = self.component_sizes[component]
        k = self.coarsest_factor // scale_factor
        return h * k, w * k

    def transform_scales(self) -> Tuple[int, ...]:
        """带变换模块的尺度（由粗到细取前 k 个）"""
        if not self.dictionaries_enabled:
            return ()
        coarse_first = tuple(reversed(self.scale_factors))
        k = self.num_scales if self.transform_count is None else self.transform_count
        return coarse_first[:k]

    def validate(self) -> None:
        if self.num_scales < 1:
            raise ConfigError("num_scales 必须 >= 1")
        if self.dict_size < 0:
            raise ConfigError("dict_size 必须 >= 0")
        if self.input_size % (2 ** self.num_scales) != 0:
            raise ConfigError(f"input_size={self.input_size} 不能被 2^{self.num_scales} 整除")
        if self.key_dim != KEY_DIM:
            raise ConfigError(f"key_dim 固定为 {KEY_DIM}，收到 {self.key_dim}")
        if self.read_mode not in READ_MODES:
            raise ConfigError(f"未知 read_mode: {self.read_mode}")
        if self.transform_count is not None and not 1 <= self.transform_count <= self.num_scales:
            raise ConfigError("transform_count 必须在 [1, num_scales] 内")


@dataclass
class LossWeights:
    lambda_mse: float = 300.0
    lambda_perc: float = 1.0
    lambda_style: float = 0.1
    lambda_adv: Dict[int, float] = field(default_factory=lambda: {1: 4.0, 2: 1.0, 4: 0.5})

    def validate(self) -> None:
        values = [self.lambda_mse, self.lambda_perc, self.lambda_style, *self.lambda_adv.values()]
        if any(v < 0 for v in values):
            raise ConfigError("损失权重必须非负")


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr_theta: float = 2e-4
    lr_dict: float = 2e-6
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    lr_decay: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 0.01  # 相对值
    max_epochs: int = 30
    max_stage_epochs: Optional[int] = None
    skip_stages: Tuple[str, ...] = ()
    random_init_dictionary: bool = False
    max_refs_per_sample: int = 8
    task: str = "random"
    num_workers: int = 0
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    log_path: str = "train_log.jsonl"
    restorer: RestorerConfig = field(default_factory=RestorerConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.lr_theta <= 0 or self.lr_dict <= 0:
            raise ConfigError("学习率必须为正")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience 必须 >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须 >= 1")
        for s in self.skip_stages:
            if s not in ("FORWARD", "BACKWARD"):
                raise ConfigError(f"skip_stages 只能包含 FORWARD/BACKWARD，收到 {s}")
        self.restorer.validate()
        self.weights.validate()


def _parse_bool(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes", "on")


def _parse_optional_int(v: str) -> Optional[int]:
    v = v.strip()
    return None if v.lower() in ("", "none") else int(v)


def _parse_stages(v: str) -> Tuple[str, ...]:
    return tuple(s.strip().upper() for s in v.split(",") if s.strip())


# 配置文件键 -> (所在对象, 字段, 解析函数)
CONFIG_KEYS: Dict[str, Tuple[str, str, Callable[[str], object]]] = {
    "SEED": ("train", "seed", int),
    "BATCH_SIZE": ("train", "batch_size", int),
    "LR_THETA": ("train", "lr_theta", float),
    "LR_DICT": ("train", "lr_dict", float),
    "ADAM_BETA1": ("train", "adam_beta1", float),
    "ADAM_BETA2": ("train", "adam_beta2", float),
    "LR_DECAY": ("train", "lr_decay", float),
    "PLATEAU_PATIENCE": ("train", "plateau_patience", int),
    "PLATEAU_MIN_DELTA": ("train", "plateau_min_delta", float),
    "MAX_EPOCHS": ("train", "max_epochs", int),
    "MAX_STAGE_EPOCHS": ("train", "max_stage_epochs", _parse_optional_int),
    "SKIP_STAGES": ("train", "skip_stages", _parse_stages),
    "RANDOM_INIT_DICTIONARY": ("train", "random_init_dictionary", _parse_bool),
    "MAX_REFS_PER_SAMPLE": ("train", "max_refs_per_sample", int),
    "TASK": ("train", "task", str),
    "NUM_WORKERS": ("train", "num_workers", int),
    "CHECKPOINT_DIR": ("train", "checkpoint_dir", str),
    "LOG_PATH": ("train", "log_path", str),
    "BASE_CHANNELS": ("restorer", "base_channels", int),
    "NUM_SCALES": ("restorer", "num_scales", int),
    "DICT_SIZE": ("restorer", "dict_size", int),
    "INPUT_SIZE": ("restorer", "input_size", int),
    "KEY_DIM": ("restorer", "key_dim", int),
    "CHANNEL_MULTIPLIER": ("restorer", "channel_multiplier", int),
    "USE_GENERIC": ("restorer", "use_generic", _parse_bool),
    "USE_SPECIFIC": ("restorer", "use_specific", _parse_bool),
    "READ_MODE": ("restorer", "read_mode", str),
    "TRANSFORM_COUNT": ("restorer", "transform_count", _parse_optional_int),
    "LAMBDA_MSE": ("weights", "lambda_mse", float),
    "LAMBDA_PERC": ("weights", "lambda_perc", float),
    "LAMBDA_STYLE": ("weights", "lambda_style", float),
    "LAMBDA_ADV_R1": ("weights", "lambda_adv_1", float),
    "LAMBDA_ADV_R2": ("weights", "lambda_adv_2", float),
    "LAMBDA_ADV_R4": ("weights", "lambda_adv_4", float),
}


def apply_overrides(cfg: TrainConfig, values: Dict[str, Optional[str]]) -> TrainConfig:
    """
    将 KEY=VALUE 映射应用到配置副本上；未知键抛出 ConfigError
    """
    cfg = dataclasses.replace(
        cfg,
        restorer=dataclasses.replace(cfg.restorer, component_sizes=dict(cfg.restorer.component_sizes)),
        weights=dataclasses.replace(cfg.weights, lambda_adv=dict(cfg.weights.lambda_adv)),
    )
    for key, raw in values.items():
        if raw is None:
            continue
        spec = CONFIG_KEYS.get(key.strip().upper())
        if spec is None:
            raise ConfigError(f"未知配置键：{key}")
        target, name, parse = spec
        try:
            value = parse(raw)
        except ValueError as e:
            raise ConfigError(f"配置键 {key} 的值无法解析：{raw}") from e
        if target == "train" and name in ("adam_beta1", "adam_beta2"):
            b1, b2 = cfg.adam_betas
            cfg.adam_betas = (value, b2) if name == "adam_beta1" else (b1, value)
        elif target == "weights" and name.startswith("lambda_adv_"):
            cfg.weights.lambda_adv[int(name.rsplit("_", 1)[1])] = value
        elif target == "train":
            setattr(cfg, name, value)
        else:
            setattr(getattr(cfg, target), name, value)
    return cfg


def load_config(path: Optional[str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    读取 dotenv 格式的配置文件（只解析文件，不读取也不写入进程环境变量）
    """
    cfg = base or TrainConfig()
    if path:
        try:
            values = dotenv_values(path)
        except OSError as e:
            raise ConfigError(f"无法读取配置文件：{path}") from e
        cfg = apply_overrides(cfg, dict(values))
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> Dict[str, str]:
    """
    配置 -> 扁平的 KEY -> 字符串 映射（用于打印与写回配置文件）
    """
    out: Dict[str, str] = {}
    for key, (target, name, _) in CONFIG_KEYS.items():
        if target == "train" and name in ("adam_beta1", "adam_beta2"):
            value: object = cfg.adam_betas[0 if name == "adam_beta1" else 1]
        elif target == "weights" and name.startswith("lambda_adv_"):
            value = cfg.weights.lambda_adv[int(name.rsplit("_", 1)[1])]
        elif target == "train":
            value = getattr(cfg, name)
        else:
            value = getattr(getattr(cfg, target), name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        out[key] = "none" if value is None else str(value)
    return out


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in config_to_dict(cfg).items():
            f.write(f"{k}={v}\n")
