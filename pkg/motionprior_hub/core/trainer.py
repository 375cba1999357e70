"""
Обучение: AdamW, warmup-cosine расписание, ранняя остановка и
кросс-валидация с исключением одной карты.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from motionprior_hub.core import tensor as T
from motionprior_hub.core.exceptions import (
    ConfigurationError,
    ContractError,
    TrainingError,
    UnknownConfigKeyError,
)
from motionprior_hub.core.inference import (
    ClassFrequencyBaseline,
    predict_map,
    uniform_baseline,
)
from motionprior_hub.core.mapgrid import TARGETS, CropDataset, MapSample, ProbGrid
from motionprior_hub.core.metrics import (
    DEFAULT_MAX_GRID,
    DEFAULT_PAIR_CAP,
    EmdMode,
    MetricReport,
    evaluate,
)
from motionprior_hub.core.model import (
    BACKBONES,
    LOSS_POLICIES,
    ArchConfig,
    ModelWeights,
    forward,
    loss_per_patch,
    patchify,
    resolve_loss_policy,
)
from motionprior_hub.core.utils import format_float, substream
from motionprior_hub.decorators import log_action
from motionprior_hub.infra.storage import atomic_write_text, read_kv_file

logger = logging.getLogger("motionprior")

SCHEDULES = ("step", "epoch")


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 100
    base_lr: float = 1e-4
    total_batch_size: int = 256
    weight_decay: float = 0.3
    warmup_epochs: int = 20
    patience: int = 15
    seed: int = 0
    val_fraction: float = 0.2
    mask_ratio: float = 0.0
    loss_policy: str = "auto"
    backbone: str = "desk"
    crop_size: int = 64
    patch_size: int = 8
    decoder_depth: int = 1
    decoder_num_heads: int = 0
    heads: tuple[str, ...] = ("occupancy",)
    schedule: str = "step"
    max_steps_per_epoch: int = 0
    precision: str = "f32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "heads", tuple(self.heads))
        self.validate()

    def validate(self) -> None:
        if self.epochs_max < 1:
            raise ConfigurationError(f"epochs_max должен быть ≥ 1: {self.epochs_max}")
        if not 0 <= self.warmup_epochs < self.epochs_max:
            raise ConfigurationError(
                f"warmup_epochs {self.warmup_epochs} "
                f"должен быть в [0, {self.epochs_max})"
            )
        if self.patience < 1:
            raise ConfigurationError(f"patience должен быть ≥ 1: {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction {self.val_fraction} вне (0, 1)")
        if self.total_batch_size < 1:
            raise ConfigurationError(
                f"total_batch_size должен быть ≥ 1: {self.total_batch_size}"
            )
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigurationError(
                "base_lr и weight_decay не могут быть отрицательными"
            )
        if self.loss_policy not in LOSS_POLICIES:
            raise ConfigurationError(
                f"Неизвестная политика потерь '{self.loss_policy}'"
            )
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"Неизвестный backbone '{self.backbone}'")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"Неизвестное расписание '{self.schedule}'")
        if self.precision not in T.PRECISIONS:
            raise ConfigurationError(f"Неизвестная точность '{self.precision}'")
        if not self.heads or any(h not in TARGETS for h in self.heads):
            raise ConfigurationError(f"heads {self.heads} должны быть из {TARGETS}")

    def arch(self, in_channels: int) -> ArchConfig:
        return ArchConfig.from_backbone(
            self.backbone,
            crop_size=self.crop_size,
            patch_size=self.patch_size,
            in_channels=in_channels,
            decoder_depth=self.decoder_depth,
            decoder_num_heads=self.decoder_num_heads or None,
            mask_ratio=self.mask_ratio,
            heads_out=self.heads,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["heads"] = ",".join(self.heads)
        return data

    @classmethod
    def from_mapping(
        cls, values: dict[str, str], source: str = "<config>"
    ) -> TrainConfig:
        """Строковые значения key = value -> TrainConfig; лишние ключи запрещены."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in kinds:
                raise UnknownConfigKeyError(key, source)
            kwargs[key] = _coerce(key, kinds[key], raw, source)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> TrainConfig:
        return cls.from_mapping(read_kv_file(Path(path)), str(path))

    def with_overrides(self, **overrides: Any) -> TrainConfig:
        """Флаги командной строки поверх файла; None означает, что флаг не задан."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _coerce(key: str, kind: Any, raw: str, source: str) -> Any:
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if "tuple" in str(kind):
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as e:
        raise ConfigurationError(
            f"{source}: некорректное значение {key} = {raw}"
        ) from e


def write_train_config(cfg: TrainConfig, path: str | Path) -> Path:
    lines = []
    for key, value in cfg.to_dict().items():
        text = format_float(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return atomic_write_text(Path(path), "\n".join(lines) + "\n")


# --- скорость обучения -----------------------------------------------------------


def absolute_lr(base_lr: float, total_batch_size: int) -> float:
    if total_batch_size < 1:
        raise ContractError(f"Размер батча должен быть ≥ 1: {total_batch_size}")
    return base_lr * total_batch_size / 256


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Линейный разогрев до absolute_lr, затем половина косинуса до нуля."""
    peak = absolute_lr(cfg.base_lr, cfg.total_batch_size)
    epoch = min(max(float(epoch), 0.0), float(cfg.epochs_max))
    if epoch < cfg.warmup_epochs:
        return peak * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs_max - cfg.warmup_epochs)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- AdamW ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    decay_mask: dict[str, bool] | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """
    Один шаг AdamW с развязанным затуханием весов.

    p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε); decay_mask[name]=False отключает
    затухание для параметра.
    """
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(name, step)
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    updated: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(
                f"Градиент '{name}' формы {g.shape}, параметр {p.shape}"
            )
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        decays = decay_mask is None or decay_mask.get(name, True)
        decay = weight_decay if decays else 0.0
        m_hat = m / correction1
        v_hat = v / correction2
        step_size = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = (p * (1.0 - lr * decay) - step_size).astype(p.dtype)
    state.step = step
    return updated, state


def default_decay_mask(params: dict[str, np.ndarray]) -> dict[str, bool]:
    """Затухание только для матриц; смещения, LayerNorm и mask_token без него."""
    return {name: value.ndim >= 2 for name, value in params.items()}


# --- ранняя остановка ------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Эпохи нумеруются с 1; «улучшение» — строгое уменьшение потерь."""

    patience: int
    best_loss: float = math.inf
    best_epoch: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


# --- цикл обучения ---------------------------------------------------------------


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float

    def csv_line(self) -> str:
        return (
            f"{self.epoch},{format_float(self.lr)},"
            f"{format_float(self.train_loss)},{format_float(self.val_loss)}"
        )


HISTORY_HEADER = "epoch,lr,train_loss,val_loss"


def write_history_csv(rows: list[HistoryRow], path: str | Path) -> Path:
    text = "\n".join([HISTORY_HEADER] + [r.csv_line() for r in rows]) + "\n"
    return atomic_write_text(Path(path), text)


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[HistoryRow]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    steps: int


def batch_loss(
    weights: ModelWeights,
    params: dict[str, T.Tensor],
    channels: np.ndarray,
    targets: dict[str, np.ndarray],
    ratio: float,
    loss_policy: str,
    rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Средняя по головам поатчевая MSE для батча кропов."""
    arch = weights.arch
    preds, spec = forward(channels, weights, ratio=ratio, rng=rng, params=params)
    policy = resolve_loss_policy(loss_policy, ratio)
    if policy == "masked" and spec.num_masked == 0:
        policy = "all"
    losses = []
    for head in arch.heads_out:
        target = patchify(targets[head][:, None], arch.patch_size)
        losses.append(loss_per_patch(preds[head], target, policy, spec.mask))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return T.scale(total, 1.0 / len(losses))


def evaluate_loss(weights: ModelWeights, data: CropDataset, batch_size: int) -> float:
    """Потери в условиях вывода: все патчи видимы, усреднение по всем патчам."""
    params = weights.bind()
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        channels, targets = data.batch(idx, weights.params["patch_embed.weight"].dtype)
        loss = batch_loss(weights, params, channels, targets, 0.0, "all")
        total += loss.item() * len(idx)
        count += len(idx)
    return total / count


@log_action("TRAIN")
def train(
    weights: ModelWeights,
    train_data: CropDataset,
    val_data: CropDataset,
    cfg: TrainConfig,
    stream: tuple[object, ...] = ("train",),
    history_path: Path | None = None,
) -> TrainResult:
    """
    Обучение до epochs_max эпох с ранней остановкой по валидационной MSE.

    Возвращает веса лучшей эпохи; history: (epoch, lr, train_loss, val_loss).
    Вся случайность берётся из подпотоков cfg.seed с префиксом stream.
    """
    if not len(train_data) or not len(val_data):
        raise ConfigurationError("Пустая обучающая или валидационная выборка")
    dtype = T.default_dtype()
    weights = weights.astype(dtype)
    weights.target_scales = {
        h: train_data.target_scale(h) for h in weights.arch.heads_out
    }
    batch = min(cfg.total_batch_size, len(train_data))
    steps = math.ceil(len(train_data) / batch)
    if cfg.max_steps_per_epoch:
        steps = min(steps, cfg.max_steps_per_epoch)
    decay_mask = default_decay_mask(weights.params)
    state = OptimizerState()
    stopper = EarlyStopping(cfg.patience)
    best = weights.copy()
    history: list[HistoryRow] = []
    stopped_early = False

    for epoch in range(1, cfg.epochs_max + 1):
        epoch_rng = substream(cfg.seed, *stream, "epoch", epoch)
        order = epoch_rng.permutation(len(train_data))
        mask_rng = substream(cfg.seed, *stream, "mask", epoch)
        losses: list[float] = []
        lr = 0.0
        for s in range(steps):
            idx = order[s * batch : (s + 1) * batch]
            if not len(idx):
                break
            position = epoch - 1 + (s / steps if cfg.schedule == "step" else 0.0)
            lr = lr_at(position, cfg)
            channels, targets = train_data.batch(idx, dtype)
            params = weights.bind(requires_grad=True)
            loss = batch_loss(
                weights,
                params,
                channels,
                targets,
                cfg.mask_ratio,
                cfg.loss_policy,
                mask_rng,
            )
            grads = T.backward(loss, wrt=params.values())
            named = {name: grads[t] for name, t in params.items()}
            try:
                new_params, state = adamw_step(
                    weights.params, named, state, lr, cfg.weight_decay, decay_mask
                )
            except TrainingError:
                logger.info("Non-finite gradient at epoch %d step %d", epoch, s)
                raise
            weights.params = new_params
            losses.append(loss.item())

        val_loss = evaluate_loss(weights, val_data, batch)
        row = HistoryRow(epoch, lr, float(np.mean(losses)), val_loss)
        history.append(row)
        if stopper.update(epoch, val_loss):
            best = weights.copy()
        logger.info(
            "Epoch %d: lr=%.3e train_loss=%.6g val_loss=%.6g best_epoch=%d",
            epoch,
            lr,
            row.train_loss,
            val_loss,
            stopper.best_epoch,
        )
        if stopper.should_stop(epoch):
            stopped_early = epoch < cfg.epochs_max
            break

    if history_path is not None:
        write_history_csv(history, history_path)
    return TrainResult(
        best, history, stopper.best_epoch, stopper.best_loss, stopped_early, state.step
    )


# --- кросс-валидация -------------------------------------------------------------

PREDICTORS = ("model", "uniform", "class_frequency")


def validation_count(n: int, fraction: float = 0.2) -> int:
    """max(1, round(fraction·n)) с округлением половины вверх."""
    return max(1, math.floor(fraction * n + 0.5))


def split_maps(
    samples: list[MapSample], fraction: float, rng: np.random.Generator
) -> tuple[list[MapSample], list[MapSample]]:
    """Разбиение по картам: целые карты уходят в валидацию."""
    if len(samples) < 2:
        raise ConfigurationError("Для разбиения train/val нужно ≥ 2 карт")
    k = min(validation_count(len(samples), fraction), len(samples) - 1)
    chosen = set(int(i) for i in rng.permutation(len(samples))[:k])
    train_maps = [s for i, s in enumerate(samples) if i not in chosen]
    val_maps = [s for i, s in enumerate(samples) if i in chosen]
    return train_maps, val_maps


@dataclass
class FoldResult:
    map_id: str
    train_maps: list[str]
    val_maps: list[str]
    best_epoch: int
    history: list[HistoryRow]
    scores: dict[tuple[str, str], MetricReport]
    raw_sums: dict[str, float] = field(default_factory=dict)


@dataclass
class CVReport:
    folds: list[FoldResult]

    def keys(self) -> list[tuple[str, str]]:
        seen: list[tuple[str, str]] = []
        for fold in self.folds:
            for key in fold.scores:
                if key not in seen:
                    seen.append(key)
        return seen

    def aggregate(self) -> dict[tuple[str, str, str], tuple[float, float]]:
        """(голова, предиктор, метрика) -> (среднее, стандартное отклонение ddof=0)."""
        out: dict[tuple[str, str, str], tuple[float, float]] = {}
        for head, predictor in self.keys():
            key = (head, predictor)
            reports = [f.scores[key] for f in self.folds if key in f.scores]
            for metric in ("kl", "rkl", "emd"):
                values = np.array(
                    [getattr(r, metric) for r in reports], dtype=np.float64
                )
                out[(*key, metric)] = (float(values.mean()), float(values.std()))
        return out

    def csv_text(self) -> str:
        lines = ["map_id,head,predictor,kl,rkl,emd,emd_mode"]
        for fold in self.folds:
            for (head, predictor), r in fold.scores.items():
                lines.append(
                    f"{fold.map_id},{head},{predictor},{format_float(r.kl)},"
                    f"{format_float(r.rkl)},{format_float(r.emd)},{r.mode}"
                )
        agg = self.aggregate()
        for head, predictor in self.keys():
            for label, pick in (("MEAN", 0), ("STD", 1)):
                values = [agg[(head, predictor, m)][pick] for m in ("kl", "rkl", "emd")]
                lines.append(
                    f"{label},{head},{predictor},"
                    + ",".join(format_float(v) for v in values)
                    + ","
                )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        return atomic_write_text(Path(path), self.csv_text())


def _score_fold(
    weights: ModelWeights,
    held: MapSample,
    references: list[MapSample],
    heads: tuple[str, ...],
    emd_mode: EmdMode,
    pair_cap: int,
    max_grid: int,
    stride: int | None,
) -> tuple[dict[tuple[str, str], MetricReport], dict[str, float]]:
    prediction = predict_map(weights, held.semantic_map, stride=stride)
    scores: dict[tuple[str, str], MetricReport] = {}
    for head in heads:
        truth = ProbGrid.from_counts(np.clip(held.targets[head], 0.0, None))
        if truth.degenerate:
            logger.info("Map %s: empty ground truth for %s, skipped", held.map_id, head)
            continue
        frequency = ClassFrequencyBaseline(head, held.semantic_map.num_classes)
        candidates = {
            "model": prediction.grids[head].mass,
            "uniform": uniform_baseline(held.semantic_map).mass,
            "class_frequency": frequency.fit(references).predict(held.semantic_map),
        }
        for predictor, grid in candidates.items():
            if ProbGrid.from_counts(np.clip(grid, 0.0, None)).degenerate:
                grid = uniform_baseline(held.semantic_map).mass
            scores[(head, predictor)] = evaluate(
                truth, grid, emd_mode, pair_cap=pair_cap, max_grid=max_grid
            )
    return scores, prediction.raw_sums


@log_action("CROSS_VALIDATE")
def cross_validate(
    samples: list[MapSample],
    cfg: TrainConfig,
    jobs: int = 1,
    emd_mode: EmdMode | None = None,
    pair_cap: int = DEFAULT_PAIR_CAP,
    max_grid: int = DEFAULT_MAX_GRID,
    stride: int | None = None,
    out_dir: Path | None = None,
) -> CVReport:
    """
    Leave-one-map-out: каждая карта ровно один раз отложена для оценки.

    Остальные карты делятся на train/val по картам, модель обучается и
    сравнивается с равномерной и частотной по классам базовыми моделями.
    """
    if len(samples) < 3:
        raise ConfigurationError(
            f"Для кросс-валидации нужно ≥ 3 карт, дано {len(samples)}"
        )
    emd_mode = emd_mode or EmdMode()
    in_channels = samples[0].semantic_map.num_classes
    arch = cfg.arch(in_channels)

    def run_fold(i: int) -> FoldResult:
        held = samples[i]
        rest = [s for j, s in enumerate(samples) if j != i]
        train_maps, val_maps = split_maps(
            rest, cfg.val_fraction, substream(cfg.seed, "fold", i, "split")
        )
        logger.info(
            "Fold %d/%d: held=%s train=%d val=%d",
            i + 1,
            len(samples),
            held.map_id,
            len(train_maps),
            len(val_maps),
        )
        init = ModelWeights.initialize(arch, substream(cfg.seed, "fold", i, "init"))
        result = train(
            init,
            CropDataset(train_maps, arch.heads_out, arch.crop_size, in_channels),
            CropDataset(val_maps, arch.heads_out, arch.crop_size, in_channels),
            cfg,
            stream=("fold", i),
            history_path=(out_dir / f"history_fold{i:02d}.csv") if out_dir else None,
        )
        scores, raw_sums = _score_fold(
            result.weights,
            held,
            rest,
            arch.heads_out,
            emd_mode,
            pair_cap,
            max_grid,
            stride,
        )
        return FoldResult(
            held.map_id,
            [s.map_id for s in train_maps],
            [s.map_id for s in val_maps],
            result.best_epoch,
            result.history,
            scores,
            raw_sums,
        )

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        folds = list(pool.map(run_fold, range(len(samples))))
    report = CVReport(folds)
    if out_dir is not None:
        report.write_csv(out_dir / "cv_report.csv")
    return report
