"""
命令行入口：python main.py <command>

    synth      生成合成数据集
    train      训练一个变体并保存检查点
    eval       在数据集划分上评估检查点
    predict    对影像分块推理并输出彩色类别图
    gradcheck  有限差分梯度检验
    ablate     消融实验（种子 × 变体）
"""
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np
from PIL import Image

from config import CLASS_NAMES, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE
from module.ablation import run_ablation
from module.checkpoint import load_checkpoint, save_checkpoint
from module.dataset import DatasetManifest, load_split, synth_generate
from module.gradcheck import DEFAULT_TOLERANCE, GRADCHECK_TARGETS, run_named_check
from module.metrics import f1_scores, overall_accuracy, report_csv, report_frame, report_text
from module.network import ABLATION_VARIANTS, VARIANTS, ArchConfig
from module.predictor import evaluate_samples, pixel_agreement, predict_tiled, predict_whole
from module.tensor import Tensor
from module.trainer import TrainHyper, plot_loss_curve, train, trainlog_path, write_trainlog
from utils.errors import ConfigError, DataError, LANetError, NumericError
from utils.logger import make_logger
from utils.palette import label_image, palette_lines
from utils.run_config import RunConfig

_write_log = make_logger("cli")


def _load_rc(command: str, config_file: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    rc = RunConfig.load(Path(config_file) if config_file else None, overrides)
    rc.log(command)
    return rc


def _exclude_indices(rc: RunConfig) -> List[int]:
    return [CLASS_NAMES.index(name) for name in rc["f1_exclude"]]


def _check_bands(manifest: DatasetManifest, in_channels: int):
    if manifest.bands != in_channels:
        raise DataError(f"数据集波段数 {manifest.bands} 与模型 in_channels={in_channels} 不符")


def _read_raster(paths: Sequence[str]) -> Tensor:
    bands = []
    for path in paths:
        try:
            with Image.open(path) as img:
                bands.append(np.array(img.convert("L")))
        except FileNotFoundError as e:
            raise DataError(f"影像文件不存在：{path}") from e
        except OSError as e:
            raise DataError(f"无法读取影像 {path}: {e}") from e
    if len({b.shape for b in bands}) != 1:
        raise DataError(f"各波段尺寸不一致：{[b.shape for b in bands]}")
    return Tensor.wrap((np.stack(bands).astype(np.float32) / np.float32(255.0))[None])


@click.group()
def cli():
    """局部注意力语义分割（合成航拍数据）"""


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="生成种子")
@click.option("--count", type=int, default=200, show_default=True, help="场景数")
@click.option("--size", type=int, default=512, show_default=True, help="场景边长（16 的倍数）")
@click.option("--bands", type=click.IntRange(3, 5), default=4, show_default=True, help="波段数")
@click.option("--workers", type=int, default=1, show_default=True, help="并行线程数")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="输出目录")
def synth(seed, count, size, bands, workers, out_dir):
    """生成合成数据集"""
    manifest = synth_generate(seed, count, Path(out_dir), size=size, bands=bands, workers=workers)
    click.echo(f"已生成 {len(manifest.ids)} 个场景 -> {out_dir}")
    for name in ("train", "val", "test"):
        click.echo(f"  {name}: {len(manifest.split(name))}")


@cli.command(name="train")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="数据集目录")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="变体（默认取配置）")
@click.option("--config", "config_file", type=click.Path(), default=None, help="key = value 配置文件")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="检查点路径")
@click.option("--steps", type=int, default=None, help="训练步数")
@click.option("--batch", type=int, default=None, help="批大小")
@click.option("--crop", type=int, default=None, help="裁剪边长")
@click.option("--lr", type=float, default=None, help="学习率")
@click.option("--seed", type=int, default=None, help="随机种子")
@click.option("--split", default="train", show_default=True, help="训练使用的划分")
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False), default=None, help="损失曲线 PNG")
def train_cmd(data_dir, variant, config_file, out_path, steps, batch, crop, lr, seed, split, plot_path):
    """训练一个变体，保存检查点与 <ckpt>.trainlog"""
    rc = _load_rc("train", config_file, {
        "variant": variant, "steps": steps, "batch": batch, "crop": crop, "lr": lr, "seed": seed,
    })
    arch = ArchConfig.from_run_config(rc)
    hyper = TrainHyper.from_run_config(rc)
    manifest = DatasetManifest.load(Path(data_dir))
    _check_bands(manifest, arch.in_channels)
    samples = load_split(manifest, split)
    click.echo(f"训练 {rc['variant']}：{len(samples)} 个样本，{hyper.steps} 步")

    every = max(hyper.log_every, 1)

    def _progress(step: int, loss: float, step_lr: float):
        if step % every == 0 or step == hyper.steps - 1:
            click.echo(f"step {step}\tloss {loss:.6f}\tlr {step_lr:g}")

    result = train(samples, arch, rc["variant"], hyper, progress=_progress)
    digest = save_checkpoint(Path(out_path), result.params, rc)
    write_trainlog(trainlog_path(Path(out_path)), result.log)
    if plot_path:
        plot_loss_curve(result.log, Path(plot_path), title=f"{rc['variant']} seed={hyper.seed}")
        click.echo(f"损失曲线 -> {plot_path}")
    click.echo(f"检查点 -> {out_path}  sha256={digest}")


@cli.command(name="eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False), required=True, help="检查点")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="数据集目录")
@click.option("--split", default="test", show_default=True, help="评估划分")
@click.option("--config", "config_file", type=click.Path(), default=None, help="key = value 配置文件")
@click.option("--tile", type=int, default=None, help="块边长（0 表示整幅）")
@click.option("--overlap", type=int, default=None, help="块重叠")
@click.option("--workers", type=int, default=None, help="并行线程数")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="另存 CSV 报告")
def eval_cmd(ckpt_path, data_dir, split, config_file, tile, overlap, workers, csv_path):
    """评估检查点：逐类 F1、平均 F1、总体精度"""
    rc = _load_rc("eval", config_file, {"tile": tile, "overlap": overlap, "workers": workers})
    params, _ = load_checkpoint(Path(ckpt_path))
    manifest = DatasetManifest.load(Path(data_dir))
    _check_bands(manifest, params.arch.in_channels)
    samples = load_split(manifest, split)
    if not samples:
        raise DataError(f"划分 {split} 为空")
    cm = evaluate_samples(params, samples, rc["tile"], rc["overlap"], rc["workers"], rc["ignore_label"])
    frame = report_frame(cm, CLASS_NAMES, _exclude_indices(rc))
    csv_text = report_csv(frame)
    click.echo(report_text(frame))
    click.echo("")
    click.echo(csv_text, nl=False)
    if csv_path:
        Path(csv_path).write_text(csv_text, encoding="utf-8")
    _write_log(f"eval {ckpt_path} split={split} OA={overall_accuracy(cm):.6f} meanF1={f1_scores(cm, _exclude_indices(rc))[1]:.6f}")


@cli.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(dir_okay=False), required=True, help="检查点")
@click.option("--image", "images", multiple=True, required=True, help="波段 PNG（按波段顺序重复给出）")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="输出类别图 PNG")
@click.option("--config", "config_file", type=click.Path(), default=None, help="key = value 配置文件")
@click.option("--tile", type=int, default=None, help="块边长（0 表示整幅），默认 512")
@click.option("--overlap", type=int, default=None, help="块重叠，默认 64")
@click.option("--workers", type=int, default=None, help="并行线程数")
@click.option("--branch", type=click.Choice(["fused", "high", "low"]), default="fused", show_default=True, help="输出哪个分支")
@click.option("--compare-whole", is_flag=True, default=False, help="同时做整幅推理并报告像素一致率")
def predict(ckpt_path, images, out_path, config_file, tile, overlap, workers, branch, compare_whole):
    """分块推理，输出调色板类别图"""
    rc = _load_rc("predict", config_file, {"tile": tile, "overlap": overlap, "workers": workers})
    params, _ = load_checkpoint(Path(ckpt_path))
    if branch == "low" and not params.layout.has_low:
        raise click.UsageError(f"变体 {params.variant} 只有高层分支，--branch 可选 fused / high")
    raster = _read_raster(images)
    labels = predict_tiled(params, raster, rc["tile"], rc["overlap"], rc["workers"], branch)
    try:
        label_image(labels).save(out_path)
    except OSError as e:
        raise DataError(f"无法写入 {out_path}: {e}") from e
    click.echo(f"类别图 {labels.shape[0]}×{labels.shape[1]} -> {out_path}")
    for line in palette_lines():
        click.echo(f"  {line}")
    if compare_whole:
        whole = predict_whole(params, raster, branch)
        agreement = pixel_agreement(labels, whole)
        click.echo(f"分块 / 整幅一致率：{agreement:.4%}")
        _write_log(f"predict {ckpt_path} agreement={agreement:.6f}")


@cli.command()
@click.option("--module", "target", type=click.Choice(GRADCHECK_TARGETS + ("all",)), default="all", show_default=True, help="检验目标")
@click.option("--eps", type=float, default=1e-5, show_default=True, help="差分步长")
@click.option("--max-coords", type=int, default=None, help="每个输入最多检验的坐标数")
@click.option("--seed", type=int, default=0, show_default=True, help="随机种子")
@click.option("--variant", type=click.Choice(VARIANTS), default="lanet", show_default=True, help="model 目标使用的网络变体")
def gradcheck(target, eps, max_coords, seed, variant):
    """有限差分梯度检验（float64），相对误差需 < 1e-4"""
    targets = GRADCHECK_TARGETS if target == "all" else (target,)
    failed = []
    for name in targets:
        err = run_named_check(name, eps=eps, seed=seed, max_coords=max_coords, variant=variant)
        status = "ok" if err < DEFAULT_TOLERANCE else "FAIL"
        click.echo(f"{name}: max rel err = {err:.3e} [{status}]")
        if err >= DEFAULT_TOLERANCE:
            failed.append(name)
    if failed:
        raise NumericError(f"梯度检验未通过：{', '.join(failed)}")


@cli.command()
@click.option("--data", "data_dir", type=click.Path(), required=True, help="数据集目录")
@click.option("--seeds", type=click.IntRange(1), default=3, show_default=True, help="种子个数（从配置 seed 起连续取）")
@click.option("--config", "config_file", type=click.Path(), default=None, help="key = value 配置文件")
@click.option("--steps", type=int, default=None, help="每个变体的训练步数")
@click.option("--full", is_flag=True, default=False, help="同时运行 fcn-low / fcn-pam-high 对照组")
@click.option("--split", default="test", show_default=True, help="评估划分")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="逐次结果 CSV")
def ablate(data_dir, seeds, config_file, steps, full, split, csv_path):
    """消融实验：各变体的 平均 F1 / OA（均值 ± 半极差）与趋势判定"""
    rc = _load_rc("ablate", config_file, {"steps": steps})
    arch = ArchConfig.from_run_config(rc)
    hyper = TrainHyper.from_run_config(rc)
    manifest = DatasetManifest.load(Path(data_dir))
    _check_bands(manifest, arch.in_channels)
    train_samples = load_split(manifest, "train")
    test_samples = load_split(manifest, split)
    variants = VARIANTS if full else ABLATION_VARIANTS
    seed_list = [hyper.seed + i for i in range(seeds)]

    result = run_ablation(
        train_samples, test_samples, arch, hyper, seed_list, variants,
        tile=rc["tile"], overlap=rc["overlap"], workers=rc["workers"],
        exclude=_exclude_indices(rc), progress=click.echo,
    )
    click.echo("")
    click.echo(result.table_text())
    click.echo("")
    for reason in result.reasons:
        click.echo(f"  {reason}")
    click.echo(f"趋势判定：{result.verdict}")
    if csv_path:
        result.runs.to_csv(csv_path, index=False, lineterminator="\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """执行命令并返回退出码：0 成功 / 1 用法或配置 / 2 数据 / 3 数值"""
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        cli.main(args=args, prog_name="lanet", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Abort:
        click.echo("已中断", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        click.echo(f"用法错误：{e.format_message()}", err=True)
        _write_log(f"用法错误 {args}: {e.format_message()}", 'error')
        return EXIT_USAGE
    except ConfigError as e:
        click.echo(f"配置错误：{e}", err=True)
        _write_log(f"配置错误 {args}: {e}", 'error')
        return EXIT_USAGE
    except DataError as e:
        click.echo(f"数据错误：{e}", err=True)
        _write_log(f"数据错误 {args}: {e}", 'error')
        return EXIT_DATA
    except NumericError as e:
        click.echo(f"数值错误：{e}", err=True)
        _write_log(f"数值错误 {args}: {e}", 'error')
        return EXIT_NUMERIC
    except LANetError as e:
        click.echo(f"错误：{e}", err=True)
        _write_log(f"错误 {args}: {e}", 'error')
        return EXIT_DATA


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("程序被手动中断")
        sys.exit(EXIT_USAGE)
