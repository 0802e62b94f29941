"""Balanced-panel data model and long-format CSV ingestion.

A :class:`Panel` holds the outcome paths of one treated unit and its donor
pool over a common time grid, together with the number of pre-treatment
periods.  :class:`PrePostView` exposes the four array blocks every estimator
in this package consumes: the treated unit's pre/post outcome vectors and the
donors' pre/post outcome matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class PanelDataError(ValueError):
    """Raised when panel input fails validation (shape, gaps, duplicates)."""


@dataclass(frozen=True)
class Panel:
    """A balanced outcome panel with the treated unit in column 0.

    Parameters
    ----------
    outcomes : ndarray of shape (T0 + Tpost, N0 + 1)
        Outcome levels; column ``treated_index`` belongs to the treated unit,
        the remaining columns to the donors.
    t0 : int
        Number of pre-treatment periods (the treatment starts at period
        ``t0 + 1`` in 1-based time).
    unit_labels : list of str
        Column labels; ``unit_labels[treated_index]`` names the treated unit.
    time_labels : list
        Row labels (years, quarters, or plain integers).

    Notes
    -----
    The treated column is always stored at index 0; ``treated_index`` exists
    so callers never hard-code the convention.
    """

    outcomes: np.ndarray
    t0: int
    unit_labels: list[str]
    time_labels: list = field(default_factory=list)
    treated_index: int = 0

    def __post_init__(self) -> None:
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise PanelDataError("outcomes must be a 2-D array")
        t_total, n_units = y.shape
        if n_units < 3:
            raise PanelDataError(
                f"need at least 2 donors (got {n_units - 1}); a donor pool of "
                "one column cannot form a nondegenerate simplex"
            )
        if not np.all(np.isfinite(y)):
            bad = np.argwhere(~np.isfinite(y))[0]
            raise PanelDataError(
                f"missing or non-finite outcome at (time={bad[0]}, unit={bad[1]})"
            )
        if not 0 < self.t0 < t_total:
            raise PanelDataError(
                f"t0={self.t0} must leave at least one pre- and one "
                f"post-treatment period within {t_total} total periods"
            )
        if len(self.unit_labels) != n_units:
            raise PanelDataError("unit_labels length does not match outcomes")
        if self.time_labels and len(self.time_labels) != t_total:
            raise PanelDataError("time_labels length does not match outcomes")
        object.__setattr__(self, "outcomes", y)

    @property
    def n_donors(self) -> int:
        return self.outcomes.shape[1] - 1

    @property
    def t_post(self) -> int:
        return self.outcomes.shape[0] - self.t0

    @property
    def donor_labels(self) -> list[str]:
        return [
            lab
            for j, lab in enumerate(self.unit_labels)
            if j != self.treated_index
        ]


@dataclass(frozen=True)
class PrePostView:
    """The four array blocks of a panel split at the treatment date.

    Attributes
    ----------
    y_pre, y_post : ndarray
        Treated unit's outcomes, pre (length T0) and post (length Tpost).
    x_pre, x_post : ndarray
        Donor outcomes, pre (T0 × N0) and post (Tpost × N0); columns are in
        the same donor order in both blocks.
    """

    y_pre: np.ndarray
    x_pre: np.ndarray
    y_post: np.ndarray
    x_post: np.ndarray

    @property
    def t0(self) -> int:
        return self.y_pre.shape[0]

    @property
    def t_post(self) -> int:
        return self.y_post.shape[0]

    @property
    def n_donors(self) -> int:
        return self.x_pre.shape[1]


def split(panel: Panel) -> PrePostView:
    """Slice a panel into its treated/donor × pre/post blocks.

    The slices are plain views re-assembled from ``panel.outcomes`` without
    any arithmetic, so reassembling them reproduces the source exactly.
    """
    y = panel.outcomes
    j = panel.treated_index
    donors = [k for k in range(y.shape[1]) if k != j]
    return PrePostView(
        y_pre=y[: panel.t0, j].copy(),
        x_pre=y[: panel.t0, donors].copy(),
        y_post=y[panel.t0 :, j].copy(),
        x_post=y[panel.t0 :, donors].copy(),
    )


def load_csv(path: str, treated_label: str, t0: int) -> Panel:
    """Read a long-format outcome CSV into a :class:`Panel`.

    Parameters
    ----------
    path : str
        CSV file with header ``unit,time,outcome`` (UTF-8, '.' decimal
        separator).  Every (unit, time) pair must appear exactly once.
    treated_label : str
        The ``unit`` value of the treated series.
    t0 : int
        Number of pre-treatment periods.

    Returns
    -------
    Panel
        Treated unit in column 0, donors following in stable label order
        (first appearance in the file).  Time follows each unit's appearance
        order after verifying all units share an identical time sequence.

    Raises
    ------
    PanelDataError
        On missing header columns, duplicate or missing (unit, time) cells,
        unparseable outcomes, an unknown ``treated_label``, or a ``t0`` that
        leaves no post-treatment period.
    """
    units: list[str] = []
    times_by_unit: dict[str, list[str]] = {}
    values: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in ("unit", "time", "outcome") if c not in fields]
        if missing:
            raise PanelDataError(
                f"CSV header must contain unit,time,outcome (missing: "
                f"{', '.join(missing)})"
            )
        for lineno, row in enumerate(reader, start=2):
            unit, time = row["unit"], row["time"]
            if unit is None or time is None or row["outcome"] is None:
                raise PanelDataError(f"short row at line {lineno}")
            key = (unit, time)
            if key in values:
                raise PanelDataError(
                    f"duplicate observation for unit={unit!r}, time={time!r}"
                )
            try:
                values[key] = float(row["outcome"])
            except ValueError as exc:
                raise PanelDataError(
                    f"unparseable outcome {row['outcome']!r} at line {lineno}"
                ) from exc
            if unit not in times_by_unit:
                units.append(unit)
                times_by_unit[unit] = []
            times_by_unit[unit].append(time)

    if not units:
        raise PanelDataError("CSV contains no data rows")
    if treated_label not in times_by_unit:
        raise PanelDataError(
            f"treated unit {treated_label!r} not found among "
            f"{len(units)} units"
        )

    time_seq = times_by_unit[units[0]]
    time_set = set(time_seq)
    if len(time_set) != len(time_seq):
        # A repeated time for one unit without a repeated (unit, time) pair
        # cannot happen (caught above), but keep the guard explicit.
        raise PanelDataError("repeated time label within a unit")
    for unit in units:
        seq = times_by_unit[unit]
        if seq != time_seq:
            missing_t = sorted(time_set - set(seq), key=time_seq.index)
            extra_t = [t for t in seq if t not in time_set]
            if missing_t:
                raise PanelDataError(
                    f"missing observation for unit={unit!r}, "
                    f"time={missing_t[0]!r}"
                )
            if extra_t:
                raise PanelDataError(
                    f"unit {unit!r} has time {extra_t[0]!r} absent from "
                    f"unit {units[0]!r}"
                )
            raise PanelDataError(
                f"unit {unit!r} observes the shared times in a different "
                "order; reorder the file consistently"
            )

    if t0 >= len(time_seq):
        raise PanelDataError(
            f"t0={t0} leaves no post-treatment periods "
            f"(panel has {len(time_seq)} periods)"
        )

    ordered_units = [treated_label] + [u for u in units if u != treated_label]
    outcomes = np.empty((len(time_seq), len(ordered_units)), dtype=float)
    for j, unit in enumerate(ordered_units):
        for i, time in enumerate(time_seq):
            outcomes[i, j] = values[(unit, time)]

    return Panel(
        outcomes=outcomes,
        t0=t0,
        unit_labels=ordered_units,
        time_labels=list(time_seq),
    )
