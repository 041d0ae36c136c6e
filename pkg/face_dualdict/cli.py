from __future__ import annotations

import json
import logging
import pathlib
import shutil
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import click
import torch
import typer
from rich import print as rprint
from rich.logging import RichHandler
from rich.progress import track
from rich.table import Table

from .checkpoint import latest_checkpoint
from .config import TrainConfig, apply_overrides, config_to_dict, load_config
from .degrade import degrade_image, parse_task
from .dictionary import DictionaryKind, load_dictionary, save_dictionary
from .errors import EmptyDatasetError, MissingDictionaryError, UsageError, UserError
from .evalkit import evaluate, load_embedder, report_table, save_embedder, save_report, train_identity_embedder
from .imagedata import (
    LandmarkSet,
    ReferenceManifest,
    build_reference_manifest,
    load_aligned_image,
    load_landmarks,
    read_image,
    save_image,
    template_landmarks,
)
from .network import restore_image, specific_bank_from_refs
from .storage import atomic_write_text, load_manifest_jsonl, save_manifest_jsonl, save_records_jsonl
from .toy_faces import make_toy_corpus
from .training import VARIANT_NAMES, ablation_variants, load_trained, train
from .utils_seed import derive_seed, seed_everything


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
SPLITS = ("train", "val", "test")

app = typer.Typer(help="双字典人脸盲复原工具（CLI）", add_completion=False, no_args_is_help=True)
prep_app = typer.Typer(help="数据准备：玩具数据集、清单与身份嵌入网络", no_args_is_help=True)
app.add_typer(prep_app, name="prep")


# -----------------------------
# 日志与全局选项
# -----------------------------
def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    root = logging.getLogger()
    for h in [h for h in root.handlers if getattr(h, "face_dualdict", False)]:
        root.removeHandler(h)
        h.close()
    level = logging.DEBUG if verbose else logging.INFO
    root.setLevel(level)
    console = RichHandler(show_path=False, rich_tracebacks=verbose)
    console.setLevel(level)
    console.face_dualdict = True
    root.addHandler(console)
    if log_file:
        fh = logging.FileHandler(log_file, encoding="utf-8")
        fh.setFormatter(logging.Formatter(LOG_FORMAT))
        fh.face_dualdict = True
        root.addHandler(fh)
        logger.debug("日志文件：%s", log_file)


@app.callback()
def main_callback(
    ctx: typer.Context,
    seed: int = typer.Option(0, "--seed", help="全局随机种子（所有随机性由它派生）"),
    config: Optional[str] = typer.Option(None, "--config", help="KEY=VALUE 格式的配置文件，覆盖命令行参数"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="输出 DEBUG 日志"),
    log_file: Optional[str] = typer.Option(None, "--log-file", help="同时写入该日志文件"),
):
    setup_logging(verbose, log_file)
    ctx.obj = {"seed": seed, "config": config, "verbose": verbose}


def resolve_config(ctx: typer.Context, flags: Dict[str, Optional[object]], seed: Optional[int] = None) -> TrainConfig:
    """
    默认值 < 命令行参数 < 配置文件；解析完成后打印最终配置与种子
    """
    values = {k: None if v is None else str(v) for k, v in flags.items()}
    values["SEED"] = str(seed if seed is not None else ctx.obj["seed"])
    cfg = load_config(ctx.obj["config"], apply_overrides(TrainConfig(), values))
    print_config(cfg, verbose=ctx.obj["verbose"])
    seed_everything(cfg.seed)
    return cfg


def print_config(cfg: TrainConfig, verbose: bool = False) -> None:
    flat = config_to_dict(cfg)
    if verbose:
        table = Table(title="最终配置")
        table.add_column("key")
        table.add_column("value")
        for k, v in flat.items():
            table.add_row(k, v)
        rprint(table)
    else:
        rprint(f"[bold cyan]seed[/bold cyan]={cfg.seed}  " + " ".join(f"{k}={v}" for k, v in flat.items() if k != "SEED"))


SEED_HELP = "覆盖全局 --seed"


# -----------------------------
# 辅助
# -----------------------------
def load_manifests(manifest_dir: str) -> Dict[str, ReferenceManifest]:
    d = pathlib.Path(manifest_dir)
    manifests: Dict[str, ReferenceManifest] = {}
    for split in SPLITS:
        path = d / f"{split}.jsonl"
        if path.exists():
            manifests[split] = ReferenceManifest.from_records(load_manifest_jsonl(path), split)
    if not manifests.get("train") or not manifests["train"].identities:
        raise EmptyDatasetError(f"{d} 中没有 train.jsonl 或训练清单为空")
    return manifests


def load_manifest_file(path: str) -> ReferenceManifest:
    records = load_manifest_jsonl(path)
    if not records:
        raise EmptyDatasetError(f"清单为空：{path}")
    return ReferenceManifest.from_records(records)


def collect_refs(ref_dir: str, size: int) -> List[Tuple]:
    """参考目录下的 *.png（同名 .lm 可选，缺失时用模板关键点）"""
    refs = []
    for p in sorted(pathlib.Path(ref_dir).glob("*.png")):
        lm_path = p.with_suffix(".lm")
        if lm_path.exists():
            lm = load_landmarks(lm_path)
        else:
            logger.warning("参考图 %s 没有关键点文件，使用模板关键点", p)
            lm = template_landmarks(size)
        refs.append((load_aligned_image(p, size), lm))
    return refs


def resolve_checkpoint(checkpoint: Optional[str], cfg: TrainConfig) -> pathlib.Path:
    if checkpoint:
        return pathlib.Path(checkpoint)
    found = latest_checkpoint(cfg.checkpoint_dir)
    if found is None:
        raise UsageError(f"未指定 --checkpoint，且 {cfg.checkpoint_dir} 下没有检查点")
    return found


# -----------------------------
# prep
# -----------------------------
@prep_app.command("toy")
def prep_toy(
    ctx: typer.Context,
    out: str = typer.Option(..., "--out", "-o", help="输出根目录（root/id_XXXX/NN.png + NN.lm）"),
    identities: int = typer.Option(80, "--identities", help="身份数"),
    images_per_id: int = typer.Option(4, "--images-per-id", help="每个身份的图像数"),
    size: int = typer.Option(64, "--size", help="图像边长"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    生成预对齐的玩具人脸数据集（身份特征固定，姿态/表情/光照逐图变化）
    """
    cfg = resolve_config(ctx, {}, seed)
    written = make_toy_corpus(out, identities, images_per_id, size, cfg.seed)
    rprint(f"[bold green]完成！[/bold green] {identities} 个身份，{len(written)} 张图像，保存至 {out}")


@prep_app.command("manifest")
def prep_manifest(
    ctx: typer.Context,
    root: str = typer.Option(..., "--root", "-r", help="数据根目录：root/identity_id/*.png"),
    out: str = typer.Option(..., "--out", "-o", help="输出目录，写入 train/val/test.jsonl"),
    min_sharpness: float = typer.Option(0.0, "--min-sharpness", help="拉普拉斯方差阈值"),
    train_n: int = typer.Option(60, "--train", help="训练身份数"),
    val_n: int = typer.Option(10, "--val", help="验证身份数"),
    test_n: int = typer.Option(10, "--test", help="测试身份数"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    过滤模糊图像并按身份划分数据集
    """
    cfg = resolve_config(ctx, {}, seed)
    manifests = build_reference_manifest(root, min_sharpness, (train_n, val_n, test_n), seed=cfg.seed)
    table = Table(title="数据集划分")
    table.add_column("split")
    table.add_column("identities", justify="right")
    table.add_column("images", justify="right")
    for split, m in manifests.items():
        save_manifest_jsonl(m.records(), pathlib.Path(out) / f"{split}.jsonl")
        table.add_row(split, str(len(m.identities)), str(m.num_images))
    rprint(table)
    rprint(f"[bold green]完成！[/bold green] 清单保存至 {out}")


@prep_app.command("embedder")
def prep_embedder(
    ctx: typer.Context,
    manifest: str = typer.Option(..., "--manifest", "-m", help="用于训练的清单 JSONL"),
    out: str = typer.Option("embedder.pt", "--out", "-o", help="身份嵌入网络保存路径"),
    epochs: int = typer.Option(30, "--epochs", help="训练轮数"),
    size: int = typer.Option(64, "--size", help="图像边长"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    训练评估用的身份嵌入网络（身份分类器的倒数第二层）
    """
    cfg = resolve_config(ctx, {}, seed)
    model = train_identity_embedder(load_manifest_file(manifest), size, epochs, cfg.seed)
    save_embedder(model, out)
    rprint(f"[bold green]完成！[/bold green] 身份嵌入网络保存至 {out}（{model.num_identities} 个身份）")


# -----------------------------
# 主命令
# -----------------------------
@app.command("degrade")
def degrade_cmd(
    ctx: typer.Context,
    input: str = typer.Option(..., "--in", "-i", help="HQ 图像目录（递归查找 *.png）或单张图像"),
    out: str = typer.Option(..., "--out", "-o", help="LQ 输出目录"),
    task: str = typer.Option("random", "--task", "-t", help="x4 / x8 / random"),
    size: int = typer.Option(64, "--size", "-s", help="图像边长"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    合成退化 LQ 图像，并写出参数清单 degrade_params.jsonl（每张图 path, rho, r, sigma, q, seed）
    """
    task = parse_task(task).value
    cfg = resolve_config(ctx, {"TASK": task}, seed)
    src = pathlib.Path(input)
    dst = pathlib.Path(out)
    if src.is_file():
        base, paths = src.parent, [src]
    else:
        base, paths = src, sorted(src.rglob("*.png"))
    if not paths:
        raise EmptyDatasetError(f"{src} 下没有 PNG 图像")
    rows = []
    for index, p in enumerate(track(paths, description="退化中...")):
        image_seed = derive_seed(cfg.seed, index)
        lq, params = degrade_image(load_aligned_image(p, size), image_seed, task, size)
        target = dst / p.relative_to(base)
        save_image(lq, target)
        sidecar = p.with_suffix(".lm")
        if sidecar.exists():
            shutil.copyfile(sidecar, target.with_suffix(".lm"))
        rows.append({"path": str(target), **params.to_dict(), "seed": image_seed})
    save_records_jsonl(rows, dst / "degrade_params.jsonl")
    rprint(f"[bold green]完成！[/bold green] {len(rows)} 张 LQ 图像保存至 {dst}")


@app.command("build-dict")
def build_dict_cmd(
    ctx: typer.Context,
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", "-c", help="检查点（缺省取 checkpoints/ 下最新）"),
    refs: Optional[str] = typer.Option(None, "--refs", help="某身份的参考图目录；缺省则导出通用字典"),
    identity: Optional[str] = typer.Option(None, "--identity", help="专属字典的身份标签（缺省取目录名）"),
    out: str = typer.Option(..., "--out", "-o", help="字典文件输出路径"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    离线构建专属字典（--refs），或导出检查点中的通用字典
    """
    cfg = resolve_config(ctx, {}, seed)
    trained = load_trained(resolve_checkpoint(checkpoint, cfg))
    size = trained.config.restorer.input_size
    if refs:
        label = identity or pathlib.Path(refs).name
        with torch.no_grad():
            bank = specific_bank_from_refs(trained.model, collect_refs(refs, size), label).snapshot()
    else:
        if trained.generic is None:
            raise MissingDictionaryError("该检查点没有通用字典（Y=0 或未启用通用路径）")
        bank = trained.generic
    save_dictionary(bank, out)
    rprint(
        f"[bold green]完成！[/bold green] {bank.kind.value} 字典（{bank.entries_per_dict} 条/部件尺度，"
        f"身份={bank.identity or '-'}）保存至 {out}"
    )


@app.command("train")
def train_cmd(
    ctx: typer.Context,
    manifest_dir: str = typer.Option(..., "--manifest-dir", "-m", help="包含 train.jsonl / val.jsonl 的目录"),
    out: str = typer.Option("checkpoints", "--out", "-o", help="检查点目录"),
    epochs: int = typer.Option(30, "--epochs", help="训练到第几个 epoch"),
    batch_size: int = typer.Option(4, "--batch-size", help="批大小"),
    dict_size: Optional[int] = typer.Option(None, "--dict-size", help="通用字典大小 Y"),
    input_size: Optional[int] = typer.Option(None, "--input-size", help="图像边长"),
    base_channels: Optional[int] = typer.Option(None, "--base-channels", help="最细尺度通道数"),
    variant: str = typer.Option("full", "--variant", help="消融变体（见 ablate --list）"),
    resume: Optional[str] = typer.Option(None, "--resume", help="从检查点续训（latest 表示目录中最新）"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    三阶段训练（INIT -> FORWARD -> BACKWARD -> FROZEN），每个 epoch 保存 ckpt_epoch{N}.bin
    """
    flags = {
        "CHECKPOINT_DIR": out,
        "LOG_PATH": str(pathlib.Path(out) / "train_log.jsonl"),
        "MAX_EPOCHS": epochs,
        "BATCH_SIZE": batch_size,
        "DICT_SIZE": dict_size,
        "INPUT_SIZE": input_size,
        "BASE_CHANNELS": base_channels,
    }
    cfg = ablation_variants(variant, resolve_config(ctx, flags, seed))
    if resume == "latest":
        resume = str(resolve_checkpoint(None, cfg))
    last = train(cfg, load_manifests(manifest_dir), resume=resume, max_epochs=cfg.max_epochs)
    rprint(f"[bold green]完成！[/bold green] 最新检查点：{last}")


@app.command("restore")
def restore_cmd(
    ctx: typer.Context,
    input: str = typer.Option(..., "--in", "-i", help="LQ 图像"),
    out: str = typer.Option(..., "--out", "-o", help="复原结果输出路径"),
    landmarks: Optional[str] = typer.Option(None, "--landmarks", "-l", help="关键点文件；缺省使用模板关键点"),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", "-c", help="检查点（缺省取 checkpoints/ 下最新）"),
    generic_dict: Optional[str] = typer.Option(None, "--generic-dict", help="通用字典文件；缺省用检查点内的"),
    refs: Optional[str] = typer.Option(None, "--refs", help="同身份参考图目录（即时构建专属字典）"),
    specific_dict: Optional[str] = typer.Option(None, "--specific-dict", help="预先构建的专属字典文件"),
    dump_attention: bool = typer.Option(False, "--dump-attention", help="在输出旁写出注意力权重与 M_Id（JSON）"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    单张复原：只有通用字典时走通用路径；给出 --refs 或 --specific-dict 时走双字典路径
    """
    if refs and specific_dict:
        raise UsageError("--refs 与 --specific-dict 只能二选一")
    cfg = resolve_config(ctx, {}, seed)
    trained = load_trained(resolve_checkpoint(checkpoint, cfg))
    size = trained.config.restorer.input_size
    lq = read_image(input)
    lm: Optional[LandmarkSet] = load_landmarks(landmarks) if landmarks else None
    generic = load_dictionary(generic_dict) if generic_dict else trained.generic
    if generic is not None and generic.kind != DictionaryKind.GENERIC:
        raise UsageError(f"{generic_dict} 不是通用字典")

    specific = None
    if specific_dict:
        specific = load_dictionary(specific_dict)
        if specific.kind != DictionaryKind.SPECIFIC:
            raise UsageError(f"{specific_dict} 不是专属字典")
    elif refs:
        with torch.no_grad():
            specific = specific_bank_from_refs(trained.model, collect_refs(refs, size), pathlib.Path(refs).name).snapshot()

    dump: Optional[Dict] = {} if dump_attention else None
    restored = restore_image(trained.model, lq, lm, generic, specific, dump)
    save_image(restored, out)
    path = "dual" if specific is not None and not specific.is_empty else "generic"
    rprint(f"[bold green]完成！[/bold green]（{path} 路径）保存至 {out}")
    if dump is not None:
        dump_path = pathlib.Path(out).with_suffix(".attention.json")
        atomic_write_text(dump_path, json.dumps(dump.get(0, {}), ensure_ascii=False, sort_keys=True))
        rprint(f"注意力权重保存至 {dump_path}")


@app.command("eval")
def eval_cmd(
    ctx: typer.Context,
    manifest: str = typer.Option(..., "--manifest", "-m", help="测试清单 JSONL"),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", "-c", help="检查点（缺省取 checkpoints/ 下最新）"),
    task: str = typer.Option("x4", "--task", "-t", help="x4 / x8 / random"),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="评估报告 JSONL 路径"),
    fmt: str = typer.Option("table", "--format", "-f", help="jsonl 或 table"),
    embedder: Optional[str] = typer.Option(None, "--embedder", help="身份嵌入网络（缺省不计算 id_cosine）"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    评估 input / generic_only / full 三种结果的 PSNR、SSIM 与身份余弦相似度
    """
    if fmt not in ("jsonl", "table"):
        raise UsageError(f"未知格式：{fmt}（可选 jsonl / table）")
    task = parse_task(task).value
    cfg = resolve_config(ctx, {}, seed)
    trained = load_trained(resolve_checkpoint(checkpoint, cfg))
    emb = load_embedder(embedder) if embedder else None
    report = evaluate(
        trained, load_manifest_file(manifest), task, cfg.seed, emb,
        progress=lambda items: track(items, description="评估中..."),
    )
    if out:
        save_report(report, out)
        rprint(f"报告保存至 {out}")
    if fmt == "table":
        rprint(report_table(report))
    else:
        for row in report.to_rows():
            typer.echo(json.dumps(row, ensure_ascii=False))


@app.command("ablate")
def ablate_cmd(
    ctx: typer.Context,
    variant: Optional[str] = typer.Option(None, "--variant", help="消融变体名"),
    list_variants: bool = typer.Option(False, "--list", help="列出全部变体"),
    dry_run: bool = typer.Option(False, "--dry-run", help="只打印变体配置，不训练"),
    manifest_dir: Optional[str] = typer.Option(None, "--manifest-dir", "-m", help="包含 train.jsonl / val.jsonl 的目录"),
    out: str = typer.Option("ablations", "--out", "-o", help="输出目录（每个变体一个子目录）"),
    epochs: int = typer.Option(30, "--epochs", help="训练到第几个 epoch"),
    batch_size: int = typer.Option(4, "--batch-size", help="批大小"),
    seed: Optional[int] = typer.Option(None, "--seed", help=SEED_HELP),
):
    """
    按名称训练一个消融变体：full, generic_only, specific_only, no_transform, kT, Yn, OB, wo_F, wo_B
    """
    if list_variants:
        table = Table(title="消融变体")
        table.add_column("variant")
        for name in VARIANT_NAMES:
            table.add_row(name)
        rprint(table)
        return
    if not variant:
        raise UsageError("需要 --variant（或 --list）")
    target = pathlib.Path(out) / variant
    flags = {
        "CHECKPOINT_DIR": str(target),
        "LOG_PATH": str(target / "train_log.jsonl"),
        "MAX_EPOCHS": epochs,
        "BATCH_SIZE": batch_size,
    }
    base = resolve_config(ctx, flags, seed)
    cfg = ablation_variants(variant, base)
    changed = {k: v for k, v in config_to_dict(cfg).items() if config_to_dict(base)[k] != v}
    rprint(f"[bold cyan]{variant}[/bold cyan] 相对基础配置的改动：{changed or '无'}")
    if dry_run:
        return
    if not manifest_dir:
        raise UsageError("训练消融变体需要 --manifest-dir")
    last = train(cfg, load_manifests(manifest_dir), max_epochs=cfg.max_epochs)
    rprint(f"[bold green]完成！[/bold green] {variant} 最新检查点：{last}")


# -----------------------------
# 入口
# -----------------------------
def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    执行一条命令并返回退出码：0 成功，1 用户错误，2 内部错误
    """
    try:
        rv = app(args=list(argv) if argv is not None else None, prog_name="face-dualdict", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        rprint("[red]已中止[/red]")
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except UserError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1
    except Exception as e:
        logger.exception("内部错误：%s", e)
        return 2
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
