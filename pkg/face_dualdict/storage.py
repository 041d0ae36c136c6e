from __future__ import annotations

import json
import os
import pathlib
import tempfile
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List

import pandas as pd


MANIFEST_FIELDS = ["identity_id", "split", "image_path", "landmark_path", "sharpness"]


@dataclass
class ManifestRecord:
    identity_id: str
    split: str
    image_path: str
    landmark_path: str
    sharpness: float


def save_manifest_jsonl(records: List[ManifestRecord], path: str | pathlib.Path) -> None:
    """
    保存清单为 JSONL（每行一张图像），字段顺序固定为 MANIFEST_FIELDS
    """
    rows = [asdict(r) for r in records]
    df = pd.DataFrame(rows, columns=MANIFEST_FIELDS)
    atomic_write_text(path, df.to_json(orient="records", lines=True, force_ascii=False, double_precision=15) if rows else "")


def load_manifest_jsonl(path: str | pathlib.Path) -> List[ManifestRecord]:
    text = pathlib.Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    df = pd.read_json(path, orient="records", lines=True, dtype={"identity_id": str})
    results: List[ManifestRecord] = []
    for row in df.to_dict(orient="records"):
        results.append(
            ManifestRecord(
                identity_id=str(row["identity_id"]),
                split=str(row["split"]),
                image_path=str(row["image_path"]),
                landmark_path=str(row["landmark_path"]),
                sharpness=float(row["sharpness"]),
            )
        )
    return results


def save_records_jsonl(rows: List[Dict], path: str | pathlib.Path) -> None:
    """
    任意记录列表 -> JSONL（键顺序按第一条记录）
    """
    text = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)
    atomic_write_text(path, text)


def load_records_jsonl(path: str | pathlib.Path) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class JsonlLog:
    """追加写入的行日志（训练过程中逐条写）"""

    def __init__(self, path: str | pathlib.Path):
        self.path = pathlib.Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def write_many(self, records: Iterable[Dict]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r, ensure_ascii=False) + "\n")

    def truncate_after(self, epoch: int) -> None:
        """续训时丢弃 epoch 之后的记录"""
        if not self.path.exists():
            return
        kept = [r for r in load_records_jsonl(self.path) if int(r.get("epoch", 0)) <= epoch]
        save_records_jsonl(kept, self.path)


def atomic_write_bytes(path: str | pathlib.Path, data: bytes) -> None:
    """先写临时文件再 rename，保证读者看不到写了一半的文件"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: str | pathlib.Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
