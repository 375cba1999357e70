"""
Расстояния между распределениями на сетке: KL, обратная KL, EMD.

Земляное расстояние считается по евклидовой метрике между центрами ячеек в пикселях.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import ot
from scipy.spatial.distance import cdist

from motionprior_hub.core.exceptions import (
    ContractError,
    ConvergenceError,
    EmdCapExceededError,
)
from motionprior_hub.core.mapgrid import ProbGrid

DEFAULT_EPS = 1e-12
DEFAULT_PAIR_CAP = 65_536
DEFAULT_MAX_GRID = 32
EXACT_MAX_ITER = 100_000


def _mass(x: ProbGrid | np.ndarray) -> np.ndarray:
    return np.asarray(x.mass if isinstance(x, ProbGrid) else x, dtype=np.float64)


def _pair(
    p: ProbGrid | np.ndarray, q: ProbGrid | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    a, b = _mass(p), _mass(q)
    if a.shape != b.shape:
        raise ContractError(f"Формы распределений не совпадают: {a.shape} и {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise ContractError("Распределения должны быть неотрицательными")
    return a, b


def _smooth(x: np.ndarray, eps: float) -> np.ndarray:
    x = x + eps
    total = x.sum()
    if total <= 0:
        raise ContractError("Нулевая масса распределения при eps=0")
    return x / total


def kl_div(
    p: ProbGrid | np.ndarray,
    q: ProbGrid | np.ndarray,
    eps: float = DEFAULT_EPS,
    base: float = math.e,
) -> float:
    """KL(P‖Q) для ε-сглаженных перенормированных сеток; нулевые P̃ не вносят вклад."""
    a, b = _pair(p, q)
    ps, qs = _smooth(a, eps), _smooth(b, eps)
    support = ps > 0
    value = float(np.sum(ps[support] * np.log(ps[support] / qs[support])))
    return value / math.log(base) if base != math.e else value


def reverse_kl(
    p: ProbGrid | np.ndarray,
    q: ProbGrid | np.ndarray,
    eps: float = DEFAULT_EPS,
    base: float = math.e,
) -> float:
    return kl_div(q, p, eps, base)


@dataclass(frozen=True)
class EmdResult:
    distance: float
    coupling: np.ndarray
    source_cells: np.ndarray
    target_cells: np.ndarray
    mode: str = "exact"
    approximate: bool = False


def _support(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cells = np.argwhere(x > 0)
    return cells, x[x > 0]


def _solve_exact(a: np.ndarray, b: np.ndarray) -> EmdResult:
    src, wa = _support(a)
    dst, wb = _support(b)
    if not len(src) or not len(dst):
        raise ContractError("EMD: распределение без носителя")
    wa = wa / wa.sum()
    wb = wb / wb.sum()
    cost = cdist(src.astype(np.float64), dst.astype(np.float64))
    coupling, log = ot.emd(wa, wb, cost, numItermax=EXACT_MAX_ITER, log=True)
    if log.get("warning"):
        residual = max(
            float(np.abs(coupling.sum(axis=1) - wa).max()),
            float(np.abs(coupling.sum(axis=0) - wb).max()),
        )
        raise ConvergenceError(EXACT_MAX_ITER, residual)
    distance = max(0.0, float(np.sum(coupling * cost)))
    return EmdResult(distance, coupling, src, dst)


def emd_exact(
    p: ProbGrid | np.ndarray,
    q: ProbGrid | np.ndarray,
    pair_cap: int = DEFAULT_PAIR_CAP,
) -> EmdResult:
    """Точный оптимальный транспорт сетевым симплексом на носителях P и Q."""
    a, b = _pair(p, q)
    pairs = int(np.count_nonzero(a)) * int(np.count_nonzero(b))
    if pairs > pair_cap:
        raise EmdCapExceededError(pairs, pair_cap)
    return _solve_exact(a, b)


def block_sum(x: np.ndarray, factor: int) -> np.ndarray:
    """Суммы по блокам factor×factor; край дополняется нулями."""
    h, w = x.shape
    ph, pw = -h % factor, -w % factor
    padded = np.pad(x, ((0, ph), (0, pw)))
    hh, ww = padded.shape
    return padded.reshape(hh // factor, factor, ww // factor, factor).sum(axis=(1, 3))


def _sinkhorn(
    a: np.ndarray, b: np.ndarray, lam: float, iters: int, tol: float
) -> EmdResult:
    src, wa = _support(a)
    dst, wb = _support(b)
    if not len(src) or not len(dst):
        raise ContractError("EMD: распределение без носителя")
    wa = wa / wa.sum()
    wb = wb / wb.sum()
    cost = cdist(src.astype(np.float64), dst.astype(np.float64))
    coupling = ot.sinkhorn(
        wa,
        wb,
        cost,
        reg=1.0 / lam,
        method="sinkhorn_log",
        numItermax=iters,
        stopThr=tol,
        warn=False,
    )
    residual = max(
        float(np.abs(coupling.sum(axis=1) - wa).max()),
        float(np.abs(coupling.sum(axis=0) - wb).max()),
    )
    if not np.isfinite(residual) or residual > tol * 10:
        raise ConvergenceError(iters, residual)
    distance = float(np.sum(coupling * cost))
    return EmdResult(distance, coupling, src, dst, "entropic", True)


@dataclass(frozen=True)
class EmdMode:
    """
    Режим EMD: exact | downsample(factor) | entropic(lam, iters) | auto.

    Строковая форма: "exact", "downsample:2", "entropic:50:2000", "auto".
    """

    kind: str = "auto"
    factor: int = 1
    lam: float = 50.0
    iters: int = 2000
    tol: float = 1e-7

    @classmethod
    def parse(cls, text: str) -> EmdMode:
        parts = text.strip().split(":")
        try:
            if parts[0] in ("exact", "auto") and len(parts) == 1:
                return cls(parts[0])
            if parts[0] == "downsample" and len(parts) == 2:
                return cls("downsample", factor=int(parts[1]))
            if parts[0] == "entropic" and len(parts) in (2, 3):
                iters = int(parts[2]) if len(parts) == 3 else 2000
                return cls("entropic", lam=float(parts[1]), iters=iters)
        except ValueError:
            pass
        raise ContractError(f"Неизвестный режим EMD '{text}'")

    def label(self) -> str:
        if self.kind == "downsample":
            return f"downsample:{self.factor}"
        if self.kind == "entropic":
            return f"entropic:{format(self.lam, 'g')}:{self.iters}"
        return self.kind


def emd_grid(
    p: ProbGrid | np.ndarray,
    q: ProbGrid | np.ndarray,
    mode: EmdMode | None = None,
    pair_cap: int = DEFAULT_PAIR_CAP,
    max_grid: int = DEFAULT_MAX_GRID,
) -> EmdResult:
    """
    EMD для сеток любого размера.

    auto: точно, если укладывается в лимит, иначе downsample до ≤ max_grid.
    downsample(k): блочные суммы, точное решение, расстояние × k.
    entropic: Синхорн с регуляризацией 1/lam, результат помечен как приближённый.
    """
    mode = mode or EmdMode()
    a, b = _pair(p, q)
    if mode.kind == "exact":
        return emd_exact(a, b, pair_cap)
    if mode.kind == "auto":
        pairs = int(np.count_nonzero(a)) * int(np.count_nonzero(b))
        if pairs <= pair_cap:
            return _solve_exact(a, b)
        factor = max(2, math.ceil(max(a.shape) / max_grid))
        mode = EmdMode("downsample", factor=factor)
    if mode.kind == "downsample":
        if mode.factor < 1:
            raise ContractError(f"Коэффициент downsample {mode.factor} < 1")
        coarse = _solve_exact(block_sum(a, mode.factor), block_sum(b, mode.factor))
        return EmdResult(
            coarse.distance * mode.factor,
            coarse.coupling,
            coarse.source_cells,
            coarse.target_cells,
            mode.label(),
            mode.factor > 1,
        )
    if mode.kind == "entropic":
        return _sinkhorn(a, b, mode.lam, mode.iters, mode.tol)
    raise ContractError(f"Неизвестный режим EMD '{mode.kind}'")


@dataclass(frozen=True)
class MetricReport:
    kl: float
    rkl: float
    emd: float
    eps: float
    shape: tuple[int, int]
    mode: str

    def csv_line(self) -> str:
        return f"{self.kl!r},{self.rkl!r},{self.emd!r},{self.mode},{self.eps!r}"


def evaluate(
    gt: ProbGrid | np.ndarray,
    pred: ProbGrid | np.ndarray,
    mode: EmdMode | None = None,
    eps: float = DEFAULT_EPS,
    pair_cap: int = DEFAULT_PAIR_CAP,
    max_grid: int = DEFAULT_MAX_GRID,
) -> MetricReport:
    """Все три метрики; предсказание обрезается до ≥0 и нормируется."""
    truth = ProbGrid.from_counts(np.clip(_mass(gt), 0.0, None))
    guess = ProbGrid.from_counts(np.clip(_mass(pred), 0.0, None))
    if truth.degenerate or guess.degenerate:
        raise ContractError("Метрики для вырожденного (нулевого) распределения")
    emd = emd_grid(truth, guess, mode, pair_cap, max_grid)
    return MetricReport(
        kl=kl_div(truth, guess, eps),
        rkl=reverse_kl(truth, guess, eps),
        emd=emd.distance,
        eps=eps,
        shape=truth.shape,
        mode=emd.mode,
    )
