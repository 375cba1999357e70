import argparse
import os
import sys
from pathlib import Path

from prettytable import PrettyTable

from motionprior_hub import __version__
from motionprior_hub.core import tensor as T
from motionprior_hub.core.checkpoint import load_weights, save_weights
from motionprior_hub.core.exceptions import (
    ConfigurationError,
    ContractError,
    MotionPriorError,
)
from motionprior_hub.core.inference import HEATMAP_FORMATS, export_heatmap, predict_map
from motionprior_hub.core.mapgrid import (
    CLASS_SETS,
    LEGACY9_NAMES,
    CropDataset,
    MapSample,
    remap_class_set,
)
from motionprior_hub.core.metrics import EmdMode, evaluate
from motionprior_hub.core.model import BACKBONES, LOSS_POLICIES, ModelWeights
from motionprior_hub.core.trainer import (
    SCHEDULES,
    CVReport,
    TrainConfig,
    cross_validate,
    split_maps,
    train,
    write_train_config,
)
from motionprior_hub.core.utils import format_float, substream
from motionprior_hub.decorators import log_action
from motionprior_hub.infra.manifest import RunManifest
from motionprior_hub.infra.settings import SettingsLoader
from motionprior_hub.infra.storage import (
    DatasetStorage,
    atomic_write_text,
    read_json,
    read_pgrid_array,
    read_smap,
    write_kv_file,
    write_smap,
)
from motionprior_hub.ingest.annotations import trajectories_to_sdd_lines
from motionprior_hub.ingest.config import IngestConfig, SceneEntry, scene_values
from motionprior_hub.ingest.dataset import (
    MAPS_DIR,
    SUMMARY_FILE,
    TARGETS_DIR,
    DatasetBuilder,
    discover_scenes,
    load_dataset,
)
from motionprior_hub.ingest.synthetic import SceneConfig, generate_synthetic_scene
from motionprior_hub.logging_config import setup_logging

SYNTH_METERS_PER_SOURCE_PX = 0.04

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2


# --- аргументы -----------------------------------------------------------------


def _shared(out_required: bool = True) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=None)
    parent.add_argument("--jobs", type=int, default=None)
    parent.add_argument("--out", type=Path, required=out_required)
    parent.add_argument("--config", type=Path, default=None)
    parent.add_argument("--precision", choices=tuple(T.PRECISIONS), default=None)
    return parent


def _heads(value: str) -> tuple[str, ...]:
    return tuple(h.strip() for h in value.split(",") if h.strip())


def _train_flags(parser: argparse.ArgumentParser) -> None:
    """Флаги повторяют имена полей TrainConfig."""
    parser.add_argument("--dataset", type=Path, required=True)
    parser.add_argument("--epochs-max", type=int)
    parser.add_argument("--base-lr", type=float)
    parser.add_argument("--total-batch-size", type=int)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--warmup-epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--val-fraction", type=float)
    parser.add_argument("--mask-ratio", type=float)
    parser.add_argument("--loss-policy", choices=LOSS_POLICIES)
    parser.add_argument("--backbone", choices=tuple(BACKBONES))
    parser.add_argument("--crop-size", type=int)
    parser.add_argument("--patch-size", type=int)
    parser.add_argument("--decoder-depth", type=int)
    parser.add_argument("--decoder-num-heads", type=int)
    parser.add_argument("--heads", type=_heads)
    parser.add_argument("--schedule", choices=SCHEDULES)
    parser.add_argument("--max-steps-per-epoch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionprior",
        description="Приоры движения пешеходов по семантическим картам",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    shared = _shared()

    p = sub.add_parser("gen-synth", parents=[shared], help="синтетические сцены")
    p.add_argument("--maps", type=int, default=4)
    p.add_argument(
        "--size", type=int, nargs=2, metavar=("H", "W"), default=(128, 128)
    )
    p.add_argument("--walkers", type=int, default=40)

    p = sub.add_parser("build-dataset", parents=[shared], help="сборка датасета")
    p.add_argument("--inputs", type=Path, required=True)
    p.add_argument("--crops", type=int, default=None)
    p.add_argument("--augment", type=int, default=None)
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--class-set", choices=tuple(CLASS_SETS), default="full13")
    p.add_argument("--v-stop", type=float, default=0.25)
    p.add_argument("--t-stop", type=float, default=1.0)

    p = sub.add_parser("train", parents=[shared], help="обучение модели")
    _train_flags(p)

    p = sub.add_parser("cross-validate", parents=[shared], help="leave-one-map-out")
    _train_flags(p)
    p.add_argument("--emd-mode", default="auto")
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("predict", parents=[shared], help="предсказание по карте")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--format", choices=HEATMAP_FORMATS, default="pgrid")
    p.add_argument("--random-crops", type=int, default=None)

    p = sub.add_parser(
        "metrics", parents=[_shared(out_required=False)], help="KL, rKL и EMD"
    )
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--emd-mode", default="auto")
    p.add_argument("--eps", type=float, default=1e-12)
    return parser


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    return int(SettingsLoader().get("DEFAULT_SEED", 0))


def _jobs(args: argparse.Namespace) -> int:
    if args.jobs:
        return max(1, args.jobs)
    return os.cpu_count() or 1


def _emd_limits() -> tuple[int, int]:
    settings = SettingsLoader()
    return (
        int(settings.get("EMD_PAIR_CAP", 65_536)),
        int(settings.get("EMD_MAX_GRID", 32)),
    )


# --- команды -------------------------------------------------------------------


@log_action("GEN_SYNTH")
def _cmd_gen_synth(args: argparse.Namespace) -> int:
    seed = _seed(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    h, w = args.size
    manifest = RunManifest(
        "gen-synth",
        {"maps": args.maps, "size": [h, w], "walkers": args.walkers},
        seed,
    )
    table = PrettyTable()
    table.field_names = ["map", "size", "walkers", "samples", "unreachable"]
    for i in range(args.maps):
        map_id = f"map_{i:02d}"
        scene_seed = int(substream(seed, "map", map_id).integers(0, 2**62))
        scene = generate_synthetic_scene(
            SceneConfig(height=h, width=w, walkers=args.walkers, seed=scene_seed)
        )
        trajset = scene.trajectories
        write_smap(out / f"{map_id}.smap", scene.semantic_map)
        lines = trajectories_to_sdd_lines(trajset, SYNTH_METERS_PER_SOURCE_PX)
        atomic_write_text(
            out / f"{map_id}.tracks", "".join(f"{line}\n" for line in lines)
        )
        entry = SceneEntry(
            map_id,
            out / f"{map_id}.smap",
            out / f"{map_id}.tracks",
            trajset.fps,
            SYNTH_METERS_PER_SOURCE_PX,
            ("Pedestrian",),
        )
        write_kv_file(out / f"{map_id}.scene", scene_values(entry))
        table.add_row(
            [map_id, f"{h}x{w}", len(trajset), trajset.num_samples, scene.unreachable]
        )
    manifest.write(out)
    print(table)
    return EXIT_OK


@log_action("BUILD_DATASET")
def _cmd_build_dataset(args: argparse.Namespace) -> int:
    settings = SettingsLoader()
    seed = _seed(args)
    out: Path = args.out
    augment = args.augment
    if augment is None:
        augment = int(settings.get("AUGMENTATIONS_PER_CROP", 5))
    config = IngestConfig(
        RESOLUTION_M_PER_PX=float(settings.get("RESOLUTION_M_PER_PX", 0.4)),
        V_STOP=args.v_stop,
        T_STOP=args.t_stop,
        CROPS_PER_MAP=args.crops or int(settings.get("CROPS_PER_MAP", 500)),
        AUGMENTATIONS_PER_CROP=augment,
        CROP_SIZE=args.crop_size,
        CLASS_SET=args.class_set,
    )
    sources = discover_scenes(args.inputs)
    if not sources:
        raise ConfigurationError(f"В '{args.inputs}' нет файлов *.scene")
    manifest = RunManifest(
        "build-dataset", {**config.to_dict(), "inputs": str(args.inputs)}, seed
    )
    manifest.add_inputs([p for p in Path(args.inputs).iterdir() if p.is_file()])
    builder = DatasetBuilder(
        config, DatasetStorage(out / MAPS_DIR), seed, targets_dir=out / TARGETS_DIR
    )
    summary = builder.build(sources, jobs=_jobs(args))
    manifest.config["training_crops"] = {
        m.map_id: m.training_crops for m in summary.maps
    }
    manifest.write(out)

    table = PrettyTable()
    table.field_names = ["map", "size", "trajectories", "samples", "lost", "crops"]
    for m in summary.maps:
        table.add_row(
            [
                m.map_id,
                f"{m.height}x{m.width}",
                m.trajectories,
                m.samples,
                m.lost_dropped,
                m.training_crops,
            ]
        )
    print(table)
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    """Файл конфигурации, поверх него флаги командной строки."""
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    return cfg.with_overrides(
        epochs_max=args.epochs_max,
        base_lr=args.base_lr,
        total_batch_size=args.total_batch_size,
        weight_decay=args.weight_decay,
        warmup_epochs=args.warmup_epochs,
        patience=args.patience,
        val_fraction=args.val_fraction,
        mask_ratio=args.mask_ratio,
        loss_policy=args.loss_policy,
        backbone=args.backbone,
        crop_size=args.crop_size,
        patch_size=args.patch_size,
        decoder_depth=args.decoder_depth,
        decoder_num_heads=args.decoder_num_heads,
        heads=args.heads,
        schedule=args.schedule,
        max_steps_per_epoch=args.max_steps_per_epoch,
        seed=args.seed,
        precision=args.precision,
    )


def _load_training_maps(dataset: Path, cfg: TrainConfig) -> list[MapSample]:
    summary = read_json(dataset / SUMMARY_FILE, default={})
    crop_size = summary.get("crop_size") if isinstance(summary, dict) else None
    if crop_size is not None and int(crop_size) != cfg.crop_size:
        raise ConfigurationError(
            f"Датасет собран с кропом {crop_size}, а crop_size = {cfg.crop_size}"
        )
    samples = load_dataset(dataset)
    if not samples:
        raise ConfigurationError(f"В датасете '{dataset}' нет карт")
    return samples


@log_action("RUN_TRAINING")
def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_training_maps(args.dataset, cfg)
    manifest = RunManifest(
        "train", {**cfg.to_dict(), "dataset": str(args.dataset)}, cfg.seed
    )
    manifest.add_inputs(sorted((args.dataset / MAPS_DIR).glob("*.npz")))

    with T.numeric_mode(cfg.precision, check_finite=False):
        train_maps, val_maps = split_maps(
            samples, cfg.val_fraction, substream(cfg.seed, "split")
        )
        arch = cfg.arch(samples[0].semantic_map.num_classes)
        weights = ModelWeights.initialize(arch, substream(cfg.seed, "init"))
        result = train(
            weights,
            CropDataset(train_maps, arch.heads_out, arch.crop_size, arch.in_channels),
            CropDataset(val_maps, arch.heads_out, arch.crop_size, arch.in_channels),
            cfg,
            history_path=out / "history.csv",
        )
    save_weights(result.weights, out / "weights.smp2w")
    write_train_config(cfg, out / "train_config.cfg")
    manifest.config["train_maps"] = [s.map_id for s in train_maps]
    manifest.config["val_maps"] = [s.map_id for s in val_maps]
    manifest.config["best_epoch"] = result.best_epoch
    manifest.config["weights_checksum"] = result.weights.checksum()
    manifest.write(out)
    print(
        f"Обучение завершено: эпох {len(result.history)}, "
        f"лучшая {result.best_epoch}, val_loss={format_float(result.best_val_loss)}"
    )
    return EXIT_OK


def _cv_table(report: CVReport) -> PrettyTable:
    table = PrettyTable()
    table.field_names = ["head", "predictor", "KL", "rKL", "EMD"]
    agg = report.aggregate()
    for head, predictor in report.keys():
        cells = []
        for metric in ("kl", "rkl", "emd"):
            mean, std = agg[(head, predictor, metric)]
            cells.append(f"{mean:.4f} ± {std:.4f}")
        table.add_row([head, predictor, *cells])
    return table


@log_action("RUN_CROSS_VALIDATION")
def _cmd_cross_validate(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_training_maps(args.dataset, cfg)
    mode = EmdMode.parse(args.emd_mode)
    pair_cap, max_grid = _emd_limits()
    manifest = RunManifest(
        "cross-validate",
        {**cfg.to_dict(), "dataset": str(args.dataset), "emd_mode": mode.label()},
        cfg.seed,
    )
    manifest.add_inputs(sorted((args.dataset / MAPS_DIR).glob("*.npz")))
    with T.numeric_mode(cfg.precision, check_finite=False):
        report = cross_validate(
            samples,
            cfg,
            jobs=_jobs(args),
            emd_mode=mode,
            pair_cap=pair_cap,
            max_grid=max_grid,
            stride=args.stride,
            out_dir=out,
        )
    manifest.write(out)
    print(_cv_table(report))
    return EXIT_OK


@log_action("PREDICT")
def _cmd_predict(args: argparse.Namespace) -> int:
    seed = _seed(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    weights = load_weights(args.weights)
    smap = read_smap(args.map)
    legacy = len(LEGACY9_NAMES)
    if weights.arch.in_channels == legacy and smap.num_classes != legacy:
        smap = remap_class_set(smap, "legacy9")
    stride = (
        args.stride
        or int(SettingsLoader().get("INFERENCE_STRIDE", 0))
        or weights.arch.crop_size // 2
    )
    mode = "random" if args.random_crops else "sliding"
    prediction = predict_map(
        weights,
        smap,
        stride=stride,
        mode=mode,
        count=args.random_crops or 0,
        rng=substream(seed, "predict", args.map.stem),
        jobs=_jobs(args),
    )
    manifest = RunManifest(
        "predict",
        {
            "stride": stride,
            "mode": mode,
            "random_crops": args.random_crops,
            "format": args.format,
        },
        seed,
    )
    manifest.add_inputs([args.weights, args.map])
    ext = "pgrid" if args.format == "pgrid" else "pgm"
    checksum = weights.checksum()
    for head, grid in prediction.grids.items():
        export_heatmap(
            grid,
            out / f"{args.map.stem}.{head}.{ext}",
            args.format,
            {
                "head": head,
                "mode": mode,
                "stride": stride if mode == "sliding" else "",
                "crops": prediction.plan.num_crops,
                "seed": seed,
                "weights_checksum": checksum,
                "pre_normalization_sum": format_float(prediction.raw_sums[head]),
            },
        )
    manifest.write(out)
    print(f"Предсказание сохранено в {out}: {', '.join(prediction.grids)}")
    return EXIT_OK


@log_action("METRICS")
def _cmd_metrics(args: argparse.Namespace) -> int:
    pair_cap, max_grid = _emd_limits()
    report = evaluate(
        read_pgrid_array(args.a),
        read_pgrid_array(args.b),
        EmdMode.parse(args.emd_mode),
        eps=args.eps,
        pair_cap=pair_cap,
        max_grid=max_grid,
    )
    line = report.csv_line()
    print(line)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(
            args.out / "metrics.csv", f"kl,rkl,emd,emd_mode,eps\n{line}\n"
        )
        manifest = RunManifest(
            "metrics", {"emd_mode": args.emd_mode, "eps": args.eps}, _seed(args)
        )
        manifest.add_inputs([args.a, args.b])
        manifest.write(args.out)
    return EXIT_OK


COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "build-dataset": _cmd_build_dataset,
    "train": _cmd_train,
    "cross-validate": _cmd_cross_validate,
    "predict": _cmd_predict,
    "metrics": _cmd_metrics,
}


def dispatch(argv: list[str]) -> int:
    """
    Разбор аргументов и запуск подкоманды.

    Коды выхода: 0 успех, 1 ошибка данных или вычислений,
    2 ошибка конфигурации или использования.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    setup_logging(args.out / "logs" if args.out is not None else None)
    precision = args.precision or SettingsLoader().get("DEFAULT_PRECISION", "f32")
    try:
        with T.numeric_mode(precision, check_finite=False):
            return COMMANDS[args.command](args)
    except (ConfigurationError, ContractError) as e:
        print(f"Ошибка конфигурации: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MotionPriorError as e:
        print(f"Ошибка: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"Ошибка ввода-вывода: {e}", file=sys.stderr)
        return EXIT_DATA


def run_cli() -> None:
    sys.exit(dispatch(sys.argv[1:]))
