from __future__ import annotations
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.error_handler import DomainError

FLOAT_FORMAT = '%.12e'
MIN_ROWS = 3


@dataclass
class RateFit:
    """Least-squares slope of log(error) against log(parameter)"""
    slope: Optional[float]
    intercept: Optional[float]
    pairwise: List[Optional[float]] = field(default_factory=list)
    exact: bool = False
    points: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'slope': 'exact' if self.exact else self.slope,
            'intercept': self.intercept,
            'pairwise': self.pairwise,
            'points': self.points
        }

    def at_least(self, bound: float) -> bool:
        return self.exact or (self.slope is not None and self.slope >= bound)


def fit_rates(x: Sequence[float], errors: Sequence[float],
              exact_floor: float = 0.0) -> RateFit:
    """Fit errors ~ C x^slope.

    Rows with error <= exact_floor are left out of the regression; if no row
    remains the result is flagged exact. Pairwise slopes are level to level.
    """
    x = np.asarray(x, dtype=float)
    e = np.asarray(errors, dtype=float)
    if x.shape != e.shape or x.ndim != 1:
        raise DomainError("x and errors must be one-dimensional and of equal length")
    if len(x) < MIN_ROWS:
        raise DomainError(f"at least {MIN_ROWS} rows are needed to fit a rate")
    if np.any(x <= 0):
        raise DomainError("mesh/time parameters must be positive")

    usable = e > exact_floor
    pairwise: List[Optional[float]] = []
    for i in range(1, len(x)):
        if usable[i] and usable[i - 1] and x[i] != x[i - 1]:
            pairwise.append(float(np.log(e[i] / e[i - 1]) / np.log(x[i] / x[i - 1])))
        else:
            pairwise.append(None)

    if usable.sum() == 0:
        return RateFit(slope=None, intercept=None, pairwise=pairwise, exact=True, points=0)
    if usable.sum() < 2 or np.unique(x[usable]).size < 2:
        return RateFit(slope=None, intercept=None, pairwise=pairwise, points=int(usable.sum()))

    slope, intercept = np.polyfit(np.log(x[usable]), np.log(e[usable]), 1)
    return RateFit(slope=float(slope), intercept=float(intercept), pairwise=pairwise,
                   points=int(usable.sum()))


class ConvergenceTable:
    """Rows of a refinement study plus the fitted slopes"""

    def __init__(self, columns: Sequence[str], meta: Optional[Dict[str, Any]] = None):
        self.columns = list(columns)
        self.rows: List[Dict[str, Any]] = []
        self.slopes: Dict[str, RateFit] = {}
        self.meta: Dict[str, Any] = dict(meta or {})

    def __len__(self) -> int:
        return len(self.rows)

    def add_row(self, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise DomainError(f"Unknown table columns: {sorted(unknown)}")
        self.rows.append({c: values.get(c) for c in self.columns})
        self.rows.sort(key=lambda row: row.get('level', 0))

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def fit(self, x: str, y: str, name: Optional[str] = None,
            transform=None, exact_floor: float = 0.0) -> RateFit:
        values = self.column(y)
        if transform is not None:
            values = transform(values)
        result = fit_rates(self.column(x), values, exact_floor=exact_floor)
        self.slopes[name or f"{y}_vs_{x}"] = result
        return result

    def add_slope_column(self, x: str, y: str, name: str = 'slope_to_prev'):
        if name not in self.columns:
            self.columns.append(name)
        result = fit_rates(self.column(x), self.column(y))
        self.rows[0][name] = None
        for row, slope in zip(self.rows[1:], result.pairwise):
            row[name] = slope

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def to_csv(self, path: Optional[str] = None) -> str:
        text = self.frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        if path is not None:
            with open(path, 'w', newline='') as f:
                f.write(text)
        return text

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rows': json.loads(self.frame.to_json(orient='records', double_precision=15)),
            'slopes': {k: v.to_dict() for k, v in self.slopes.items()},
            'meta': self.meta
        }
