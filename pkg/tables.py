"""
Count tables for binary exposure / outcome data.

A table is a set of cell groups sharing the same declared axes. Each group
observes some of the axes and leaves the rest latent: recall-only data is a
single group with T latent, validation data (W known for a subsample) is one
fully observed group plus one group with W latent.
"""

import itertools
import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataError

logger = logging.getLogger(__name__)

AXIS_ORDER = ("T", "W", "X", "Y", "S")
LEVELS = (0, 1)


def canonical_axes(axes: Iterable[str]) -> Tuple[str, ...]:
    axes = set(axes)
    unknown = axes - set(AXIS_ORDER)
    if unknown:
        raise DataError(f"Unknown axis name(s): {sorted(unknown)}; allowed axes are {list(AXIS_ORDER)}")
    return tuple(a for a in AXIS_ORDER if a in axes)


class RawCell(BaseModel):
    model_config = ConfigDict(extra="forbid")
    index: Dict[str, int]
    count: float


class CellGroup(BaseModel):
    model_config = ConfigDict(frozen=True)
    observed: Tuple[str, ...]
    latent: Tuple[str, ...] = ()
    counts: Dict[Tuple[int, ...], float]

    @property
    def total(self) -> float:
        return float(sum(self.counts.values()))

    def array(self) -> np.ndarray:
        """Counts as an array with one binary dimension per observed axis"""
        out = np.zeros((2,) * len(self.observed))
        for key, value in self.counts.items():
            out[key] = value
        return out


class StratifiedCountTable(BaseModel):
    model_config = ConfigDict(frozen=True)
    axes: Tuple[str, ...]
    groups: Tuple[CellGroup, ...]

    @model_validator(mode="after")
    def _check_cells(self):
        if not self.groups:
            raise DataError("Table has no cell groups")
        declared = set(self.axes)
        seen_latent = set()
        for group in self.groups:
            if set(group.observed) | set(group.latent) != declared or set(group.observed) & set(group.latent):
                raise DataError(
                    f"Group axes {group.observed} + latent {group.latent} do not partition table axes {self.axes}"
                )
            if group.latent in seen_latent:
                raise DataError(f"Duplicate cell group for latent axes {group.latent}")
            seen_latent.add(group.latent)
            expected = set(itertools.product(LEVELS, repeat=len(group.observed)))
            missing = expected - set(group.counts)
            if missing:
                raise DataError(f"Missing cell(s) {sorted(missing)} over axes {group.observed}")
            extra = set(group.counts) - expected
            if extra:
                raise DataError(f"Cell index outside binary levels: {sorted(extra)}")
            for key, value in group.counts.items():
                if not math.isfinite(value) or value < 0:
                    raise DataError(f"Cell {key} over {group.observed} has invalid count {value}")
        if self.total <= 0:
            raise DataError("Table has no positive cell")
        return self

    @property
    def total(self) -> float:
        return float(sum(g.total for g in self.groups))

    @property
    def latent_axes(self) -> Tuple[str, ...]:
        latent = set()
        for group in self.groups:
            latent.update(group.latent)
        return tuple(a for a in self.axes if a in latent)

    @property
    def is_complete(self) -> bool:
        return not self.latent_axes

    def group(self, latent: Sequence[str] = ()) -> Optional[CellGroup]:
        key = tuple(a for a in self.axes if a in set(latent))
        for g in self.groups:
            if g.latent == key:
                return g
        return None

    def margin(self, axes: Sequence[str]) -> np.ndarray:
        """Counts summed over every axis not listed, pooled over all groups"""
        axes = tuple(axes)
        for axis in axes:
            if axis not in self.axes:
                raise DataError(f"Axis {axis} not in table axes {self.axes}")
        out = np.zeros((2,) * len(axes))
        for group in self.groups:
            hidden = [a for a in axes if a not in group.observed]
            if hidden:
                raise DataError(f"Axis {hidden[0]} is latent in a cell group; margin over {axes} not observed")
            arr = group.array()
            drop = tuple(i for i, a in enumerate(group.observed) if a not in axes)
            summed = arr.sum(axis=drop) if drop else arr
            kept = [a for a in group.observed if a in axes]
            out += np.transpose(summed, [kept.index(a) for a in axes])
        return out

    def counts_array(self, axes: Optional[Sequence[str]] = None) -> np.ndarray:
        """Full-dimensional counts of a complete table, in the requested axis order"""
        if not self.is_complete:
            raise DataError(f"Table has latent axes {self.latent_axes}; full counts are not observed")
        return self.margin(axes or self.axes)

    def collapse(self, axis: str) -> "StratifiedCountTable":
        return collapse(self, axis)

    def rename_axis(self, old: str, new: str) -> "StratifiedCountTable":
        if old not in self.axes:
            raise DataError(f"Axis {old} not in table axes {self.axes}")
        if new in self.axes:
            raise DataError(f"Axis {new} already present in {self.axes}")
        mapping = {old: new}
        axes = canonical_axes(mapping.get(a, a) for a in self.axes)
        groups = []
        for group in self.groups:
            observed = [mapping.get(a, a) for a in group.observed]
            order = [observed.index(a) for a in axes if a in observed]
            counts = {tuple(key[i] for i in order): v for key, v in group.counts.items()}
            groups.append(
                CellGroup(
                    observed=tuple(observed[i] for i in order),
                    latent=tuple(a for a in axes if a in {mapping.get(x, x) for x in group.latent}),
                    counts=counts,
                )
            )
        return StratifiedCountTable(axes=axes, groups=tuple(groups))

    def with_latent_axis(self, axis: str) -> "StratifiedCountTable":
        """Declare an extra axis that no record observes (e.g. true exposure T)"""
        if axis in self.axes:
            raise DataError(f"Axis {axis} already present in {self.axes}")
        axes = canonical_axes(self.axes + (axis,))
        groups = tuple(
            CellGroup(
                observed=g.observed,
                latent=tuple(a for a in axes if a in set(g.latent) | {axis}),
                counts=dict(g.counts),
            )
            for g in self.groups
        )
        return StratifiedCountTable(axes=axes, groups=groups)

    def to_two_by_two(self, row: str, col: str) -> "TwoByTwo":
        m = self.margin((row, col))
        return TwoByTwo(n11=m[1, 1], n10=m[1, 0], n01=m[0, 1], n00=m[0, 0])


class TwoByTwo(BaseModel):
    """Rows index the first variable, columns the second; level 1 first."""

    model_config = ConfigDict(frozen=True)
    n11: float = Field(ge=0)
    n10: float = Field(ge=0)
    n01: float = Field(ge=0)
    n00: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_total(self):
        if self.n11 + self.n10 + self.n01 + self.n00 <= 0:
            raise DataError("2x2 table total must be positive")
        return self

    @classmethod
    def from_cells(cls, cells: Sequence[float]) -> "TwoByTwo":
        n11, n10, n01, n00 = (float(c) for c in cells)
        return cls(n11=n11, n10=n10, n01=n01, n00=n00)

    @property
    def cells(self) -> Tuple[float, float, float, float]:
        return (self.n11, self.n10, self.n01, self.n00)

    def transpose(self) -> "TwoByTwo":
        return TwoByTwo(n11=self.n11, n10=self.n01, n01=self.n10, n00=self.n00)


def load_table(
    cells: Sequence[Union[RawCell, Mapping]],
    axes: Optional[Sequence[str]] = None,
) -> StratifiedCountTable:
    """
    Build a validated table from raw cells.
    A cell whose index omits a declared axis belongs to the group with that
    axis latent.
    """
    raw = [c if isinstance(c, RawCell) else RawCell.model_validate(c) for c in cells]
    if not raw:
        raise DataError("No cells supplied")
    if axes is None:
        axes = canonical_axes(a for c in raw for a in c.index)
    else:
        if len(set(axes)) != len(axes):
            raise DataError(f"Duplicate axis in {list(axes)}")
        canonical_axes(axes)
        axes = tuple(axes)

    grouped: Dict[Tuple[str, ...], Dict[Tuple[int, ...], float]] = {}
    for cell in raw:
        unknown = set(cell.index) - set(axes)
        if unknown:
            raise DataError(f"Cell {cell.index} names axes {sorted(unknown)} not in {list(axes)}")
        if cell.count < 0 or not math.isfinite(cell.count):
            raise DataError(f"Negative or non-finite count {cell.count} at {cell.index}")
        observed = tuple(a for a in axes if a in cell.index)
        key = tuple(cell.index[a] for a in observed)
        if any(level not in LEVELS for level in key):
            raise DataError(f"Cell {cell.index} has a non-binary level")
        bucket = grouped.setdefault(observed, {})
        if key in bucket:
            raise DataError(f"Duplicate cell {cell.index}")
        bucket[key] = float(cell.count)

    groups = tuple(
        CellGroup(observed=observed, latent=tuple(a for a in axes if a not in observed), counts=counts)
        for observed, counts in sorted(grouped.items(), key=lambda kv: -len(kv[0]))
    )
    table = StratifiedCountTable(axes=tuple(axes), groups=groups)
    logger.debug(f"Loaded table over {table.axes} with {len(groups)} group(s), total {table.total}")
    return table


def table_from_two_by_two(t: TwoByTwo, row: str = "Y", col: str = "X") -> StratifiedCountTable:
    """Complete two-axis table from a 2x2 laid out with `row` as rows"""
    cells = [
        {"index": {row: 1, col: 1}, "count": t.n11},
        {"index": {row: 1, col: 0}, "count": t.n10},
        {"index": {row: 0, col: 1}, "count": t.n01},
        {"index": {row: 0, col: 0}, "count": t.n00},
    ]
    return load_table(cells)


def collapse(table: StratifiedCountTable, axis: str) -> StratifiedCountTable:
    """Sum counts over one axis; the axis must be observed in every group"""
    if axis not in table.axes:
        raise DataError(f"Axis {axis} not in table axes {table.axes}")
    groups = []
    for group in table.groups:
        if axis not in group.observed:
            raise DataError(f"Axis {axis} is latent in a cell group and cannot be collapsed")
        pos = group.observed.index(axis)
        counts: Dict[Tuple[int, ...], float] = {}
        for key, value in group.counts.items():
            reduced = key[:pos] + key[pos + 1:]
            counts[reduced] = counts.get(reduced, 0.0) + value
        groups.append(
            CellGroup(
                observed=tuple(a for a in group.observed if a != axis),
                latent=group.latent,
                counts=counts,
            )
        )
    return StratifiedCountTable(axes=tuple(a for a in table.axes if a != axis), groups=tuple(groups))


def impute(table: StratifiedCountTable, axis: str, prob_one: np.ndarray) -> StratifiedCountTable:
    """
    Fill in a latent axis: counts with the axis missing are split by
    Pr(axis = 1 | other axes) and added to the counts where it was observed.
    prob_one is indexed by the remaining axes in table order.
    """
    others = tuple(a for a in table.axes if a != axis)
    prob_one = np.asarray(prob_one, dtype=float)
    if prob_one.shape != (2,) * len(others):
        raise DataError(f"Imputation probabilities must have shape {(2,) * len(others)}, got {prob_one.shape}")
    if np.any(prob_one < 0) or np.any(prob_one > 1):
        raise DataError("Imputation probabilities must lie in [0, 1]")
    full = np.zeros((2,) * len(table.axes))
    pos = table.axes.index(axis)
    for group in table.groups:
        if set(group.latent) - {axis}:
            raise DataError(f"Cannot impute {axis}: group also has latent axes {group.latent}")
        if axis in group.observed:
            full += np.transpose(group.array(), [group.observed.index(a) for a in table.axes])
        else:
            arr = np.transpose(group.array(), [group.observed.index(a) for a in others])
            full += np.stack([arr * (1.0 - prob_one), arr * prob_one], axis=pos)
    counts = {key: float(full[key]) for key in itertools.product(LEVELS, repeat=len(table.axes))}
    return StratifiedCountTable(axes=table.axes, groups=(CellGroup(observed=table.axes, counts=counts),))


def _checked_cells(t: TwoByTwo, continuity: bool) -> List[float]:
    cells = list(t.cells)
    if continuity:
        return [c + 0.5 for c in cells]
    if min(cells) <= 0:
        raise DataError(f"Zero cell in 2x2 table {t.cells}; set the continuity flag to add 0.5")
    return cells


def odds_ratio(t: TwoByTwo, continuity: bool = False) -> float:
    n11, n10, n01, n00 = _checked_cells(t, continuity)
    return n11 * n00 / (n10 * n01)


def wald_log_or_se(t: TwoByTwo, continuity: bool = False) -> float:
    return math.sqrt(sum(1.0 / c for c in _checked_cells(t, continuity)))
