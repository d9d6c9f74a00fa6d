"""
Monte Carlo sensitivity analysis and exact transparent-parameterization sampling.

Each draw pairs an identified-table draw (Dirichlet posterior or stratified
bootstrap) with an independent prior draw of the bias block; the bias block
is never updated by the data. Draw i belongs to chunk i // chunk, and every
chunk owns two substreams of the seed (0: identified, 1: bias), so results do
not depend on the number of worker threads.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

from errors import ConfigError, DataError, SamplingError
from model import (
    T_BLOCK,
    X_BLOCK,
    SelectionCoefs,
    log_confounding_factor,
    log_cross_ratio,
    log_misclass_factor,
    selection_bias_factor,
    transparent_array,
)
from priors import PriorPanel, sample_prior
from tables import StratifiedCountTable

logger = logging.getLogger(__name__)

MAX_DROPPED_FRACTION = 0.001
BOX_CLAMP = 50.0

Kind = Literal["misclassification", "confounder", "selection-density", "selection-stratum"]


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    draws: int = Field(250_000, ge=1)
    seed: int = Field(20090101, ge=0, lt=2**64)
    identified_mode: Literal["dirichlet", "bootstrap"] = "dirichlet"
    dirichlet_prior: float = Field(1.0, ge=0)
    chunk: int = Field(4096, ge=1)
    threads: int = Field(1, ge=1)


class DrawSet(BaseModel):
    """Kept draws in draw-index order; all values on the log scale except bias"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
    kind: str
    bias_names: Tuple[str, ...]
    index: np.ndarray
    log_target: np.ndarray
    identified: np.ndarray
    log_factor: np.ndarray
    bias: np.ndarray
    requested: int
    dropped: int = 0

    @property
    def target(self) -> np.ndarray:
        return np.exp(self.log_target)

    def __len__(self) -> int:
        return len(self.log_target)


class DrawSummary(BaseModel):
    model_config = ConfigDict(frozen=True)
    n: int
    dropped: int = 0
    levels: Tuple[float, ...]
    median: float
    percentiles: Dict[str, float]
    log_mean: float
    log_variance: float
    variance_ratio: Optional[float] = None


class IgnoranceInterval(BaseModel):
    """Target range over the box; hi is None when the target is unbounded above"""

    model_config = ConfigDict(frozen=True)
    lo: float
    hi: Optional[float] = None
    bounded: bool = True
    argmin: Dict[str, float] = Field(default_factory=dict)
    argmax: Dict[str, float] = Field(default_factory=dict)


def _stream(seed: int, chunk: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk, stream)))


def identified_counts(a: StratifiedCountTable, axes: Sequence[str]) -> np.ndarray:
    """2x2 counts indexed [other, y] with Y as the design-fixed stratum axis"""
    if tuple(axes)[-1] != "Y":
        raise ConfigError(f"Identified tables are stratified by Y, got axes {tuple(axes)}")
    for axis in axes:
        if axis not in a.axes:
            raise DataError(f"Table over {a.axes} has no {axis} axis")
    return a.margin(axes)


def _draw_identified_array(counts: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    totals = counts.sum(axis=0)
    if np.any(totals <= 0):
        raise SamplingError(f"Empty outcome stratum in {counts.tolist()}")
    if cfg.identified_mode == "dirichlet":
        shape = counts + cfg.dirichlet_prior
        if np.any(np.all(shape <= 0, axis=0)):
            raise SamplingError("Dirichlet posterior has no mass in a stratum")
        g = rng.gamma(shape, size=(size, 2, 2))
        return g / g.sum(axis=1, keepdims=True) * totals
    if not np.allclose(counts, np.round(counts)):
        raise DataError("Bootstrap resampling needs integer counts")
    out = np.empty((size, 2, 2))
    for y in (0, 1):
        n_y = int(round(totals[y]))
        out[:, :, y] = rng.multinomial(n_y, counts[:, y] / totals[y], size=size)
    return out


def draw_identified(
    a: StratifiedCountTable,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    size: Optional[int] = None,
    axes: Sequence[str] = ("X", "Y"),
) -> np.ndarray:
    """
    Per-Y-stratum draw of the identified cells, indexed [..., other, y]:
    conjugate Dirichlet posterior scaled to the stratum total, or a multinomial
    resample of the stratum counts.
    """
    counts = identified_counts(a, axes)
    draws = _draw_identified_array(counts, cfg, rng, 1 if size is None else size)
    return draws[0] if size is None else draws


def _misclassification(e: np.ndarray, bias: np.ndarray):
    identified = log_cross_ratio(e)
    log_ty = log_cross_ratio(transparent_array(e, bias).sum(axis=-2))
    return identified, identified - log_ty, log_ty


def _confounder(e: np.ndarray, bias: np.ndarray):
    identified = log_cross_ratio(e)
    log_r = log_confounding_factor(bias, 0.0)
    return identified, log_r, identified - log_r


def _selection_density(e: np.ndarray, bias: np.ndarray):
    identified = log_cross_ratio(e)
    log_r = -bias[..., 0]
    return identified, log_r, identified + log_r


def _selection_stratum(e: np.ndarray, bias: np.ndarray):
    identified = log_cross_ratio(e)
    log_r = log_misclass_factor(bias)
    return identified, log_r, identified + log_r


class _Kind(BaseModel):
    model_config = ConfigDict(frozen=True)
    axes: Tuple[str, str]
    bias: Tuple[str, ...]
    compute: Callable


KINDS: Dict[str, _Kind] = {
    "misclassification": _Kind(axes=("X", "Y"), bias=T_BLOCK, compute=_misclassification),
    "confounder": _Kind(axes=("X", "Y"), bias=("beta_T", "beta_TX", "beta_TY"), compute=_confounder),
    "selection-density": _Kind(axes=("T", "Y"), bias=("beta_STY",), compute=_selection_density),
    "selection-stratum": _Kind(axes=("T", "Y"), bias=X_BLOCK, compute=_selection_stratum),
}


def _kind(kind: str) -> _Kind:
    if kind not in KINDS:
        raise ConfigError(f"Unknown sampler kind {kind}; expected one of {sorted(KINDS)}")
    return KINDS[kind]


def _grid(cells) -> np.ndarray:
    m = np.asarray(cells, dtype=float).reshape(2, 2)
    if np.any(m <= 0):
        raise DataError(f"Cell expectations must be positive, got {m.tolist()}")
    return m


def misclass_draw(e_star, beta_T_star) -> float:
    """OR*_TY from identified XY expectations [x, y] and a T-block draw"""
    return float(np.exp(_misclassification(_grid(e_star), np.asarray(beta_T_star, dtype=float))[2]))


def confounder_draw(e_star, beta_T_star) -> float:
    """Crude OR*_XY over the confounding factor of (b_T, b_TX, b_TY) with b_TXY = 0"""
    return float(np.exp(_confounder(_grid(e_star), np.asarray(beta_T_star, dtype=float)[:3])[2]))


def selection_draw(
    e0_star,
    s_star: Optional[SelectionCoefs] = None,
    mode: Literal["density", "stratum"] = "density",
    beta_X_star: Optional[Sequence[float]] = None,
) -> float:
    """X=0 stratum TY cross-product [t, y] times the selection factor"""
    factor = selection_bias_factor(s_star or SelectionCoefs(), mode, beta_X_star)
    return float(np.exp(log_cross_ratio(_grid(e0_star)))) * factor


def _bias_priors(kind: _Kind, panel: PriorPanel):
    priors = [panel.get(n) for n in kind.bias]
    flat = [p.target for p in priors if p.is_flat]
    if flat:
        raise SamplingError(f"Bias coefficients {flat} need proper priors for sampling")
    return priors


def run_sampler(kind: Kind, a: StratifiedCountTable, panel: PriorPanel, cfg: SamplerConfig) -> DrawSet:
    spec = _kind(kind)
    priors = _bias_priors(spec, panel)
    counts = identified_counts(a, spec.axes)
    n_chunks = math.ceil(cfg.draws / cfg.chunk)

    def work(c: int):
        size = min(cfg.chunk, cfg.draws - c * cfg.chunk)
        # stream 0 feeds the identified cells, stream 1 the bias coefficients
        e = _draw_identified_array(counts, cfg, _stream(cfg.seed, c, 0), size)
        rng = _stream(cfg.seed, c, 1)
        bias = np.column_stack([sample_prior(p, rng, size) for p in priors])
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            identified, log_factor, log_target = spec.compute(e, bias)
        return identified, log_factor, log_target, bias

    if cfg.threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(work, range(n_chunks)))
    else:
        parts = [work(c) for c in range(n_chunks)]

    # merge chunks in index order
    identified, log_factor, log_target, bias = (np.concatenate([p[i] for p in parts]) for i in range(4))
    keep = np.isfinite(log_target)
    # non-finite draws are dropped but keep their original index
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        logger.warning(f"Dropped {dropped} non-finite draw(s) of {cfg.draws}")
    if dropped > MAX_DROPPED_FRACTION * cfg.draws:
        raise SamplingError(f"{dropped} of {cfg.draws} draws are non-finite (limit {MAX_DROPPED_FRACTION:.1%})")
    logger.info(f"Sampled {cfg.draws} {kind} draws in {n_chunks} chunk(s), mode {cfg.identified_mode}")
    return DrawSet(
        kind=kind,
        bias_names=spec.bias,
        index=np.flatnonzero(keep),
        log_target=log_target[keep],
        identified=identified[keep],
        log_factor=log_factor[keep],
        bias=bias[keep],
        requested=cfg.draws,
        dropped=dropped,
    )


def _order_statistic(sorted_values: np.ndarray, q: float) -> float:
    k = max(1, math.ceil(round(q * len(sorted_values), 9)))
    return float(sorted_values[k - 1])


def summarize(
    draws,
    levels: Sequence[float] = (0.025, 0.975),
    crude_log_var: Optional[float] = None,
) -> DrawSummary:
    """Percentiles at the ceil(q n) order statistic plus log-scale moments"""
    if isinstance(draws, DrawSet):
        values, dropped = draws.target, draws.dropped
    else:
        values, dropped = np.asarray(draws, dtype=float), 0
    finite = np.isfinite(values) & (values > 0)
    bad = int(np.count_nonzero(~finite))
    total = len(values) + dropped
    dropped += bad
    if dropped > MAX_DROPPED_FRACTION * total:
        raise SamplingError(f"{dropped} of {total} draws are non-finite (limit {MAX_DROPPED_FRACTION:.1%})")
    values = np.sort(values[finite])
    if len(values) < 2:
        raise SamplingError("Summaries need at least 2 finite draws")
    levels = tuple(sorted(levels))
    if any(not 0 < q < 1 for q in levels):
        raise ConfigError(f"Percentile levels must lie in (0, 1), got {levels}")
    logs = np.log(values)
    log_variance = float(np.var(logs, ddof=1))
    ratio = None
    if crude_log_var is not None:
        if log_variance <= 0:
            raise SamplingError("Draws have zero variance; the variance ratio is undefined")
        ratio = crude_log_var / log_variance
    return DrawSummary(
        n=len(values),
        dropped=dropped,
        levels=levels,
        median=_order_statistic(values, 0.5),
        percentiles={f"{100 * q:g}": _order_statistic(values, q) for q in levels},
        log_mean=float(np.mean(logs)),
        log_variance=log_variance,
        variance_ratio=ratio,
    )


def ignorance_interval(
    e_hat,
    box: Mapping[str, Tuple[float, float]],
    kind: Kind = "misclassification",
) -> IgnoranceInterval:
    """
    Range of the target over a box of bias coefficients with the identified
    cells fixed: exact on the corners, then L-BFGS-B from the best corners and
    the centre. Infinite box edges are searched out to +/-50 and reported as
    unbounded when the target runs off.
    """
    spec = _kind(kind)
    missing = [n for n in spec.bias if n not in box]
    if missing:
        raise ConfigError(f"Ignorance box misses {missing}")
    e = _grid(e_hat)[None]
    lower = np.array([box[n][0] for n in spec.bias], dtype=float)
    upper = np.array([box[n][1] for n in spec.bias], dtype=float)
    if np.any(lower > upper) or np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
        raise ConfigError("Ignorance box must satisfy lo <= hi on every coefficient")
    open_edges = bool(np.any(np.isinf(lower)) or np.any(np.isinf(upper)))
    # infinite edges are searched inside a finite clamp
    lower = np.clip(lower, -BOX_CLAMP, BOX_CLAMP)
    upper = np.clip(upper, -BOX_CLAMP, BOX_CLAMP)
    # degenerate edges stay fixed at their value
    free = [i for i in range(len(spec.bias)) if upper[i] > lower[i]]

    def log_target(points: np.ndarray) -> np.ndarray:
        return spec.compute(np.broadcast_to(e, (len(points), 2, 2)), points)[2]

    def full(x: np.ndarray) -> np.ndarray:
        point = lower.copy()
        point[free] = x
        return point

    # exact pass over the box corners
    corners = np.array([full(np.array(c)) for c in itertools.product(*[(lower[i], upper[i]) for i in free])])
    values = log_target(corners)
    best = {"min": (values.min(), corners[values.argmin()]), "max": (values.max(), corners[values.argmax()])}

    # polish from the best corner and from the centre
    if free:
        bounds = [(lower[i], upper[i]) for i in free]
        centre = 0.5 * (lower + upper)
        for sense, sign in (("min", 1.0), ("max", -1.0)):
            for start in (best[sense][1], centre):
                res = optimize.minimize(
                    lambda x: sign * float(log_target(full(x)[None])[0]),
                    start[free],
                    method="L-BFGS-B",
                    bounds=bounds,
                )
                value = sign * float(res.fun)
                if (sense == "min" and value < best[sense][0]) or (sense == "max" and value > best[sense][0]):
                    best[sense] = (value, full(res.x))

    lo, hi = math.exp(best["min"][0]), math.exp(best["max"][0])
    # a target running off along an open edge is unbounded
    bounded = True
    if open_edges and hi > 1e8:
        hi, bounded = None, False
    if open_edges and lo < 1e-8:
        lo, bounded = 0.0, False
    return IgnoranceInterval(
        lo=lo,
        hi=hi,
        bounded=bounded,
        argmin=dict(zip(spec.bias, map(float, best["min"][1]))),
        argmax=dict(zip(spec.bias, map(float, best["max"][1]))),
    )
