"""
Saturated loglinear model over binary (T, X, Y).

ln E_txy = b0 + bT t + bX x + bY y + bTX tx + bTY ty + bXY xy + bTXY txy

The T|XY logistic regression (the "T block") gives the predictive values used
to impute true exposure, the X|TY regression (the "X block") gives the
classification probabilities. Functions named *_array are vectorized over
leading dimensions for the samplers; the rest take domain objects.
"""

import itertools
import logging
import math
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import expit

from errors import ConfigError, DataError, ModelOverflowError
from tables import LEVELS

logger = logging.getLogger(__name__)

COEF_NAMES = ("beta_0", "beta_T", "beta_X", "beta_Y", "beta_TX", "beta_TY", "beta_XY", "beta_TXY")
SELECTION_NAMES = ("beta_S", "beta_ST", "beta_SY", "beta_STY")
T_BLOCK = ("beta_T", "beta_TX", "beta_TY", "beta_TXY")
X_BLOCK = ("beta_X", "beta_TX", "beta_XY", "beta_TXY")
MODEL_AXES = ("T", "X", "Y")
MAX_ETA = 700.0

# x and y levels laid out as [x, y] grids
_X = np.array([[0.0, 0.0], [1.0, 1.0]])
_Y = np.array([[0.0, 1.0], [0.0, 1.0]])


def coef_axes(name: str) -> str:
    return "" if name == "beta_0" else name[len("beta_"):]


def model_coefs(axes: Sequence[str]) -> Tuple[str, ...]:
    """Coefficients of the saturated model over the given axes, in canonical order"""
    return tuple(n for n in COEF_NAMES if set(coef_axes(n)) <= set(axes))


def design_matrix(axes: Sequence[str]) -> np.ndarray:
    """Rows are cells in C order over axes, columns are model_coefs(axes)"""
    names = model_coefs(axes)
    rows = []
    for levels in itertools.product(LEVELS, repeat=len(axes)):
        cell = dict(zip(axes, levels))
        rows.append([math.prod(cell[a] for a in coef_axes(n)) for n in names])
    return np.array(rows, dtype=float)


class CoefVector(BaseModel):
    model_config = ConfigDict(frozen=True)
    beta_0: float = 0.0
    beta_T: float = 0.0
    beta_X: float = 0.0
    beta_Y: float = 0.0
    beta_TX: float = 0.0
    beta_TY: float = 0.0
    beta_XY: float = 0.0
    beta_TXY: float = 0.0

    @model_validator(mode="after")
    def _check_finite(self):
        bad = {n: v for n, v in self.as_dict().items() if not math.isfinite(v)}
        if bad:
            raise DataError(f"Non-finite coefficients: {bad}")
        return self

    def as_dict(self) -> Dict[str, float]:
        return {n: getattr(self, n) for n in COEF_NAMES}

    def as_array(self, names: Sequence[str] = COEF_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float], names: Sequence[str] = COEF_NAMES) -> "CoefVector":
        return cls(**{n: float(v) for n, v in zip(names, values)})

    def replace(self, **values: float) -> "CoefVector":
        return CoefVector(**{**self.as_dict(), **values})

    @property
    def T_block(self) -> np.ndarray:
        return self.as_array(T_BLOCK)

    @property
    def X_block(self) -> np.ndarray:
        return self.as_array(X_BLOCK)

    def classification_probs(self) -> np.ndarray:
        """phi_1ty = Pr(X=1 | T=t, Y=y), indexed [t, y]"""
        t, y = _X, _Y
        return expit(self.beta_X + self.beta_TX * t + self.beta_XY * y + self.beta_TXY * t * y)


class ExpectedCells(BaseModel):
    """E_txy indexed [t, x, y]"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
    values: np.ndarray

    @field_validator("values")
    @classmethod
    def _check_values(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (2, 2, 2):
            raise DataError(f"Expected cells need shape (2, 2, 2), got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DataError("Expected cells must be finite and positive")
        return v

    def cell(self, t: int, x: int, y: int) -> float:
        return float(self.values[t, x, y])

    @property
    def xy_margin(self) -> np.ndarray:
        return self.values.sum(axis=0)

    @property
    def ty_margin(self) -> np.ndarray:
        return self.values.sum(axis=1)

    @property
    def tx_margin(self) -> np.ndarray:
        return self.values.sum(axis=2)


class PredictiveValues(BaseModel):
    """pi_1xy = Pr(T=1 | X=x, Y=y) indexed [x, y]; pi_0xy = 1 - pi_1xy"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
    values: np.ndarray

    @field_validator("values")
    @classmethod
    def _check_values(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (2, 2):
            raise DataError(f"Predictive values need shape (2, 2), got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise DataError("Predictive values must be probabilities")
        return v

    def pi(self, t: int, x: int, y: int) -> float:
        p = float(self.values[x, y])
        return p if t == 1 else 1.0 - p

    def as_tuple(self) -> Tuple[float, float, float, float]:
        """(pi_111, pi_110, pi_101, pi_100)"""
        v = self.values
        return (float(v[1, 1]), float(v[1, 0]), float(v[0, 1]), float(v[0, 0]))


class SelectionCoefs(BaseModel):
    model_config = ConfigDict(frozen=True)
    beta_S: float = 0.0
    beta_ST: float = 0.0
    beta_SY: float = 0.0
    beta_STY: float = 0.0

    @model_validator(mode="after")
    def _check_finite(self):
        for name in SELECTION_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"Non-finite selection coefficient {name}")
        return self


def check_eta(eta: np.ndarray, names: Sequence[str] = (), values: Sequence[float] = ()) -> None:
    worst = float(np.max(np.abs(eta))) if np.size(eta) else 0.0
    if not math.isfinite(worst) or worst > MAX_ETA:
        report = ", ".join(f"{n}={v:.6g}" for n, v in zip(names, values))
        raise ModelOverflowError(f"Linear predictor |eta|={worst:.6g} exceeds {MAX_ETA:g} ({report})")


def expected_counts(beta: CoefVector) -> ExpectedCells:
    Z = design_matrix(MODEL_AXES)
    b = beta.as_array()
    eta = Z @ b
    check_eta(eta, COEF_NAMES, b)
    return ExpectedCells(values=np.exp(eta).reshape(2, 2, 2))


def _block(block) -> np.ndarray:
    b = np.asarray(block, dtype=float)
    if b.shape[-1] != 4:
        raise ConfigError(f"A coefficient block has 4 entries, got shape {b.shape}")
    return b


def _block_eta(block) -> np.ndarray:
    """Logit over the [x, y] grid for a (..., 4) T block"""
    b = _block(block)
    b0, bx, by, bxy = (b[..., i][..., None, None] for i in range(4))
    return b0 + bx * _X + by * _Y + bxy * _X * _Y


def predictive_array(block) -> np.ndarray:
    return expit(_block_eta(block))


def imputation_probs(beta_T_block) -> PredictiveValues:
    return PredictiveValues(values=predictive_array(beta_T_block))


def transparent_array(e_xy, block) -> np.ndarray:
    """E_txy = E_+xy * pi_txy, shape (..., 2, 2, 2) with t third from last"""
    eta = _block_eta(block)
    e_xy = np.asarray(e_xy, dtype=float)
    return np.stack([e_xy * expit(-eta), e_xy * expit(eta)], axis=-3)


def transparent_expected(e_xy, beta_T_block) -> ExpectedCells:
    """Identified XY expectations split by the T block; e_xy indexed [x, y]"""
    e_xy = np.asarray(e_xy, dtype=float).reshape(2, 2)
    if np.any(e_xy <= 0):
        raise DataError(f"Identified expectations must be positive, got {e_xy.tolist()}")
    return ExpectedCells(values=transparent_array(e_xy, beta_T_block))


def log_cross_ratio(m) -> np.ndarray:
    """ln(m11 m00 / (m10 m01)) over the last two axes"""
    m = np.asarray(m, dtype=float)
    return np.log(m[..., 1, 1]) + np.log(m[..., 0, 0]) - np.log(m[..., 1, 0]) - np.log(m[..., 0, 1])


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def log_misclass_factor(block) -> np.ndarray:
    """ln R for an X block (b_X, b_TX, b_XY, b_TXY)"""
    b = _block(block)
    a, tx, xy, txy = (b[..., i] for i in range(4))
    return _log1pexp(a + tx + xy + txy) + _log1pexp(a) - _log1pexp(a + tx) - _log1pexp(a + xy)


def log_confounding_factor(triple, beta_TXY=0.0) -> np.ndarray:
    """ln R for a T triple (b_T, b_TX, b_TY) plus the three-way term"""
    t = np.asarray(triple, dtype=float)
    bt, btx, bty = t[..., 0], t[..., 1], t[..., 2]
    return _log1pexp(bt + btx + bty + beta_TXY) + _log1pexp(bt) - _log1pexp(bt + btx) - _log1pexp(bt + bty)


def misclass_bias_factor(beta_X_block) -> float:
    return float(np.exp(log_misclass_factor(beta_X_block)))


def confounding_bias_factor(beta_T_triple, beta_TXY: float = 0.0) -> float:
    return float(np.exp(log_confounding_factor(beta_T_triple, beta_TXY)))


def roc_odds_ratios(beta_T_block) -> Tuple[float, float]:
    """True-positive over false-positive odds at Y=0 and Y=1"""
    b = _block(beta_T_block)
    return float(np.exp(b[1])), float(np.exp(b[1] + b[3]))


def marginal_or(e: ExpectedCells, pair: Literal["TY", "XY"] = "TY") -> float:
    if pair == "TY":
        m = e.ty_margin
    elif pair == "XY":
        m = e.xy_margin
    else:
        raise ConfigError(f"Unknown odds-ratio margin {pair}")
    if np.any(m <= 0):
        raise DataError(f"Zero margin in {pair} table")
    return float(np.exp(log_cross_ratio(m)))


def selection_bias_factor(
    s: SelectionCoefs,
    mode: Literal["stratum", "density"] = "density",
    beta_X_block: Optional[Sequence[float]] = None,
) -> float:
    """
    Density sampling: exp(-b_STY). Stratum sampling: the X = 1 - S misclassification
    factor of the caller's X block.
    """
    if mode == "density":
        return math.exp(-s.beta_STY)
    if mode == "stratum":
        if beta_X_block is None:
            raise ConfigError("Stratum-mode selection needs the X block (b_X, b_TX, b_XY, b_TXY)")
        return misclass_bias_factor(beta_X_block)
    raise ConfigError(f"Unknown selection mode {mode}")
