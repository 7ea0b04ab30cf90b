"""CLI 진입점 (python -m app <subcommand>)

subcommand:
- gen-data: 합성 데이터셋 생성/저장
- train: 학습 (체크포인트, 학습 로그, loss 곡선)
- eval: 테스트셋 평가 (노이즈/회전/순열/head 마스크 변형)
- ablate-heads / ablate-layers: ablation
- export-attn: attention 가중치 CSV
- inspect-config: 파라미터 수와 head 배치 출력

요약은 stdout에 JSON으로, 로그는 stderr로 나간다. 모든 출력은 --out 아래에 쓰고
실패해도 (출력 디렉토리가 만들어졌다면) run_manifest.json은 남긴다.
"""
import argparse
import json
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from app import __version__
from app.config import get_settings
from app.core.encoder import parameter_count
from app.core.errors import ConfigError
from app.core.experiment import apply_overrides, build_config, load_experiment
from app.core.models import ExperimentConfig, NoisePolicy, RunManifest
from app.services.checkpoint import LoadedCheckpoint, load_checkpoint
from app.services.dataset import ShapeDataset, generate_synthetic_dataset, load_dataset, save_dataset
from app.services.evaluation import (
    EVAL_NOISE,
    ablate_heads,
    ablate_layers,
    evaluate_testset,
    export_attention,
    write_ablation_reports,
    write_match_errors,
    write_match_reports,
)
from app.services.trainer import train
from app.utils.files import atomic_write_text, ensure_dir, sanitize_filename
from app.utils.logger import bind_run_context, get_logger, setup_logging

logger = get_logger(__name__)

MANIFEST_NAME = "run_manifest.json"


# ===== 인자 파싱 =====

def parse_head(text: str) -> tuple[int, int]:
    """"L:H" → (layer, head)"""
    try:
        layer, head = (int(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAYER:HEAD, got {text!r}") from None
    return layer, head


def positive_int(text: str) -> int:
    """1 이상의 정수"""
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def parse_noise(text: str) -> NoisePolicy:
    """"sigma:fraction" (fraction 생략 시 1.0) → NoisePolicy"""
    parts = text.split(":")
    try:
        stddev = float(parts[0])
        fraction = float(parts[1]) if len(parts) > 1 else 1.0
        if len(parts) > 2:
            raise ValueError(text)
        return NoisePolicy(stddev=stddev, fraction=fraction)
    except (ValueError, ValidationError):
        raise argparse.ArgumentTypeError(f"expected SIGMA:FRACTION, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Gaussian-attention transformer encoder for point cloud matching",
    )
    parser.add_argument("--log-level", default=None, help="debug, info, warning, error")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--out", type=Path, default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return sub

    gen = add("gen-data", "generate and save a synthetic dataset")
    gen.add_argument("--config", default=None, help="config file or preset name")

    tr = add("train", "train a model")
    tr.add_argument("--config", default=None)
    tr.add_argument("--epochs", type=positive_int, default=None)
    tr.add_argument("--data", type=Path, default=None, help="dataset directory (default: generate)")
    tr.add_argument("--noise", type=parse_noise, default=None, help="training noise SIGMA:FRACTION")

    ev = add("eval", "evaluate a checkpoint on a test set")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--data", type=Path, default=None)
    ev.add_argument("--noise", type=parse_noise, default=None, help="evaluation noise SIGMA:FRACTION")
    ev.add_argument("--noisy", action="store_true", help="evaluate with N(0, 0.01) on every point")
    ev.add_argument("--mask-head", dest="mask_heads", type=parse_head, action="append", default=[])
    ev.add_argument("--rotate", action="store_true")
    ev.add_argument("--permute", action="store_true")
    ev.add_argument("--pairs", type=positive_int, default=None)

    ah = add("ablate-heads", "mask each head in turn and evaluate")
    ah.add_argument("--checkpoint", type=Path, required=True)
    ah.add_argument("--config", default=None)
    ah.add_argument("--data", type=Path, default=None)
    ah.add_argument("--pairs", type=positive_int, default=None)

    al = add("ablate-layers", "train one short run per Gaussian layer position")
    al.add_argument("--config", default=None)
    al.add_argument("--data", type=Path, default=None)
    al.add_argument("--epochs", type=positive_int, default=None, help="epochs per layer run")

    ex = add("export-attn", "export one head's attention matrix")
    ex.add_argument("--checkpoint", type=Path, required=True)
    ex.add_argument("--config", default=None)
    ex.add_argument("--data", type=Path, default=None)
    ex.add_argument("--layer", type=int, required=True)
    ex.add_argument("--head", type=int, required=True)
    ex.add_argument("--point", type=int, default=0)
    ex.add_argument("--source", type=int, default=0, help="dataset index of X")
    ex.add_argument("--target", type=int, default=1, help="dataset index of Y")

    ic = add("inspect-config", "print parameter count and head layout")
    ic.add_argument("--config", default=None)
    ic.add_argument("--checkpoint", type=Path, default=None)
    return parser


# ===== 공통 =====

def _versions() -> dict[str, str]:
    versions = {"app": __version__, "python": platform.python_version()}
    for package in ("numpy", "scipy", "pydantic", "structlog"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _emit(summary: dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _experiment(args: argparse.Namespace, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """--config(또는 체크포인트 설정) + --set/--seed/--epochs"""
    epochs = getattr(args, "epochs", None)
    if args.config is not None or base is None:
        return load_experiment(args.config, args.overrides, seed=args.seed, epochs=epochs)
    extra = list(args.overrides)
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    return build_config(apply_overrides(base.model_dump(mode="json"), extra))


def _dataset(data: Optional[Path], experiment: ExperimentConfig) -> ShapeDataset:
    if data is not None:
        return load_dataset(data)
    cfg = experiment.data
    return generate_synthetic_dataset(cfg.count, cfg.n, seed=cfg.seed, deformation_scale=cfg.deformation_scale)


def _checkpoint(args: argparse.Namespace) -> tuple[LoadedCheckpoint, ExperimentConfig]:
    loaded = load_checkpoint(args.checkpoint)
    return loaded, _experiment(args, base=loaded.experiment or ExperimentConfig(model=loaded.header.model))


# ===== subcommand =====

def cmd_gen_data(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    experiment = _experiment(args)
    if args.seed is not None:
        experiment = build_config(apply_overrides(experiment.model_dump(mode="json"), [f"data.seed={args.seed}"]))
    manifest.config = experiment.model_dump(mode="json")
    cfg = experiment.data
    dataset = generate_synthetic_dataset(cfg.count, cfg.n, seed=cfg.seed, deformation_scale=cfg.deformation_scale)
    directory = save_dataset(dataset, out / "dataset", generator=cfg.model_dump())
    manifest.outputs.append(str(directory))
    return {"dataset": str(directory), "count": len(dataset), "n": dataset.n, "seed": cfg.seed}


def cmd_train(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    experiment = _experiment(args)
    if args.noise is not None:
        experiment = build_config(apply_overrides(
            experiment.model_dump(mode="json"),
            [f"augment.noise.stddev={args.noise.stddev}", f"augment.noise.fraction={args.noise.fraction}"],
        ))
    manifest.config = experiment.model_dump(mode="json")
    manifest.seed = experiment.seed
    dataset = _dataset(args.data, experiment)
    result = train(experiment, dataset, out)
    manifest.outputs.extend(str(p) for p in sorted(out.iterdir()) if p.name != MANIFEST_NAME)
    return {
        "variant": experiment.variant,
        "epochs": len(result.log.records),
        "final_loss": result.log.records[-1].total,
        "best_epoch": result.log.best_epoch,
        "best_loss": result.log.best_loss,
        "sigmas": result.model.sigma_values(),
        "parameters": parameter_count(experiment.model),
    }


def cmd_eval(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    loaded, experiment = _checkpoint(args)
    manifest.config = experiment.model_dump(mode="json")
    evaluation = experiment.evaluation
    seed = evaluation.seed if args.seed is None else args.seed
    manifest.seed = seed
    noise = args.noise or (EVAL_NOISE if args.noisy else evaluation.noise)
    dataset = _dataset(args.data, experiment)
    summary = evaluate_testset(
        loaded.model,
        dataset,
        pairs=args.pairs if args.pairs is not None else evaluation.pairs,
        noise=noise,
        seed=seed,
        rotate_shapes=args.rotate or evaluation.rotate,
        permute_shapes=args.permute or evaluation.permute,
        normalization=evaluation.geodesic_normalization,
        head_mask=set(args.mask_heads),
        checkpoint_epoch=loaded.header.epoch,
    )
    outputs = [
        write_match_reports(summary.reports, out / "match_reports.csv"),
        write_match_errors(summary.reports, out / "match_errors.csv"),
        atomic_write_text(out / "eval_summary.json", summary.model_dump_json(indent=2) + "\n"),
    ]
    manifest.outputs.extend(str(p) for p in outputs)
    result = summary.model_dump(mode="json", exclude={"reports"})
    result["checkpoint"] = str(args.checkpoint)
    result["head_layout"] = loaded.model.describe_layout()
    return result


def cmd_ablate_heads(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    loaded, experiment = _checkpoint(args)
    manifest.config = experiment.model_dump(mode="json")
    evaluation = experiment.evaluation
    reports = ablate_heads(
        loaded.model,
        _dataset(args.data, experiment),
        pairs=args.pairs if args.pairs is not None else evaluation.pairs,
        seed=evaluation.seed,
        normalization=evaluation.geodesic_normalization,
        classification_pairs=evaluation.classification_pairs,
    )
    path = write_ablation_reports(reports, out / "ablation_heads.csv")
    manifest.outputs.append(str(path))
    return {"reports": [r.model_dump(mode="json") for r in reports], "csv": str(path)}


def cmd_ablate_layers(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    experiment = load_experiment(args.config, args.overrides, seed=args.seed)
    manifest.config = experiment.model_dump(mode="json")
    manifest.seed = experiment.seed
    reports = ablate_layers(experiment, _dataset(args.data, experiment), out, epochs=args.epochs)
    path = write_ablation_reports(reports, out / "ablation_layers.csv")
    manifest.outputs.append(str(path))
    return {"reports": [r.model_dump(mode="json") for r in reports], "csv": str(path)}


def cmd_export_attn(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    loaded, experiment = _checkpoint(args)
    manifest.config = experiment.model_dump(mode="json")
    dataset = _dataset(args.data, experiment)
    for index in (args.source, args.target):
        if not 0 <= index < len(dataset):
            raise ConfigError(f"shape index {index} out of range for {len(dataset)} shapes")
    matrix_path, row_path = export_attention(
        loaded.model,
        dataset.clouds[args.source],
        dataset.clouds[args.target],
        args.layer,
        args.head,
        args.point,
        out,
    )
    manifest.outputs.extend([str(matrix_path), str(row_path)])
    return {"matrix": str(matrix_path), "row": str(row_path)}


def cmd_inspect_config(args: argparse.Namespace, out: Path, manifest: RunManifest) -> dict[str, Any]:
    if args.checkpoint is not None:
        loaded, experiment = _checkpoint(args)
        layout = loaded.model.describe_layout()
    else:
        experiment = _experiment(args)
        layout = experiment.model.describe_layout()
    manifest.config = experiment.model_dump(mode="json")
    return {
        "variant": experiment.variant,
        "parameters": parameter_count(experiment.model),
        "gaussian_heads": experiment.model.gaussian_head_count(),
        "head_layout": layout,
        "sigma_learnable": experiment.model.sigma_learnable,
    }


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-heads": cmd_ablate_heads,
    "ablate-layers": cmd_ablate_layers,
    "export-attn": cmd_export_attn,
    "inspect-config": cmd_inspect_config,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI 실행

    Returns:
        종료 코드 (0 성공, 2 잘못된 인자, 1 실행 오류)
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level)
    manifest = RunManifest(command=args.command, argv=argv, seed=args.seed, versions=_versions())
    out: Optional[Path] = None
    status = 1
    try:
        out = ensure_dir(args.out or Path(get_settings().output_dir) / sanitize_filename(args.command))
        bind_run_context(command=args.command, out=str(out))
        summary = HANDLERS[args.command](args, out, manifest)
        manifest.summary = summary
        _emit(summary)
        status = 0
    except Exception as e:
        _fail(manifest, e)
    finally:
        if status != 0 and manifest.status == "ok":
            manifest.status = "error"
        _write_manifest(out, manifest)
    return status


def _fail(manifest: RunManifest, error: Exception) -> None:
    message = str(error) or type(error).__name__
    manifest.status = "error"
    manifest.error = message
    logger.error("Command failed", command=manifest.command, error=message, error_type=type(error).__name__)
    sys.stderr.write(f"error: {message}\n")


def _write_manifest(out: Optional[Path], manifest: RunManifest) -> None:
    """출력 디렉토리를 만들지 못했으면 manifest 없이 로그만 남긴다"""
    if out is None:
        logger.error("Run manifest not written", reason="output directory unavailable")
        return
    try:
        atomic_write_text(out / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    except OSError as e:
        logger.error("Run manifest not written", path=str(out / MANIFEST_NAME), error=str(e))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
