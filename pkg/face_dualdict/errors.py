from __future__ import annotations

from typing import Optional


class FaceDictError(Exception):
    """所有自定义异常的基类"""


class UserError(FaceDictError):
    """输入/用法错误：CLI 退出码 1"""


class InternalError(FaceDictError):
    """内部不变量被破坏：CLI 退出码 2"""


# ---- 输入与数据 ----
class DecodeError(UserError):
    pass


class SizeError(UserError):
    pass


class EncodeError(UserError):
    pass


class DegenerateBoxError(UserError):
    pass


class BoundsError(UserError):
    pass


class EmptyDatasetError(UserError):
    pass


class DataError(UserError):
    pass


class IdentityCollisionError(UserError):
    pass


class TooManyRefsError(UserError):
    pass


class MissingDictionaryError(UserError):
    pass


# ---- 文件格式 ----
class VersionError(UserError):
    pass


class ChecksumError(UserError):
    pass


# ---- 配置与命令行 ----
class UsageError(UserError):
    pass


class ConfigError(UserError):
    pass


class UnknownVariantError(UserError):
    pass


# ---- 内部 ----
class OverlapError(InternalError):
    pass


class StageError(InternalError):
    pass


class IllegalTransitionError(InternalError):
    pass


class EmptyDictionaryError(InternalError):
    pass


class ShapeMismatchError(InternalError):
    pass


class DivergenceError(InternalError):
    """损失出现非有限值；携带最后一个有效检查点路径"""

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
