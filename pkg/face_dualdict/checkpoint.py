"""
检查点容器（ckpt_epoch{N}.bin）：

    magic       4s   b"FDCK"
    version     u16
    header_len  u32
    header      UTF-8 JSON（配置、epoch、阶段、历史、段名）
    crc32       u32  payload 的 CRC32
    payload     torch.save 的字节（各模块 state_dict、优化器状态、通用字典字节）
"""
from __future__ import annotations

import io
import json
import logging
import pathlib
import re
import struct
import zlib
from typing import Any, Dict, Optional, Tuple

import torch

from .errors import ChecksumError, VersionError
from .storage import atomic_write_bytes


logger = logging.getLogger(__name__)

MAGIC = b"FDCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
CHECKPOINT_PATTERN = re.compile(r"ckpt_epoch(\d+)\.bin$")


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch}.bin"


def save_checkpoint(path: str | pathlib.Path, header: Dict[str, Any], payload: Dict[str, Any]) -> pathlib.Path:
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = dict(header, sections=sorted(payload))
    head = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    data = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF) + body
    atomic_write_bytes(path, data)
    logger.info("检查点已保存：%s", path)
    return pathlib.Path(path)


def read_checkpoint_header(path: str | pathlib.Path) -> Dict[str, Any]:
    return _split(pathlib.Path(path).read_bytes())[0]


def _split(data: bytes) -> Tuple[Dict[str, Any], bytes]:
    if len(data) < _PREFIX.size or data[:4] != MAGIC:
        raise ChecksumError("不是检查点文件或文件已截断")
    _, version, head_len = _PREFIX.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"不支持的检查点版本：{version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
        (crc,) = struct.unpack_from("<I", data, start + head_len)
    except (ValueError, struct.error) as e:
        raise ChecksumError("检查点头部损坏") from e
    body = data[start + head_len + 4:]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("检查点校验失败（截断或损坏）")
    return header, body


def load_checkpoint(path: str | pathlib.Path) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    header, body = _split(pathlib.Path(path).read_bytes())
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    return header, payload


def latest_checkpoint(directory: str | pathlib.Path) -> Optional[pathlib.Path]:
    """目录中 epoch 最大的 ckpt_epoch{N}.bin"""
    d = pathlib.Path(directory)
    if not d.is_dir():
        return None
    found = [(int(m.group(1)), p) for p in d.iterdir() if (m := CHECKPOINT_PATTERN.search(p.name))]
    return max(found)[1] if found else None
