"""Cartesian line masks: acquisition masks, self-supervision subsets and mask banks.

All masks here are line masks along the phase-encode (row) dimension, so a row
is either fully kept or fully dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import InfeasibleRatioError, InfeasibleSpecError, InvalidInputError
from .fourier import as_mask

__all__ = [
    "MaskSpec",
    "LambdaSpec",
    "MaskStats",
    "central_rows",
    "derive_seed",
    "gen_omega",
    "gen_lambda",
    "gen_mask_bank",
    "mask_stats",
    "kept_rows",
    "rows_to_text",
    "rows_from_text",
]

_MAX_BANK_ATTEMPTS = 1000


def derive_seed(*keys: int) -> int:
    """Collapse a tuple of non-negative integers into one 64-bit seed."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    height: int
    width: int
    acceleration: int = 4
    acs_lines: int = 8
    kind: Literal["random-line", "equispaced-line"] = "random-line"
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("mask dimensions must be positive")
        if self.acceleration < 1:
            raise InvalidInputError("acceleration must be >= 1")
        if not 0 <= self.acs_lines <= self.height:
            raise InvalidInputError("acs_lines must lie in [0, height]")
        if self.kind not in ("random-line", "equispaced-line"):
            raise InvalidInputError(f"unknown mask kind {self.kind!r}")
        if self.seed < 0:
            raise InvalidInputError("seed must be non-negative")

    @property
    def n_rows(self) -> int:
        return max(math.ceil(self.height / self.acceleration), self.acs_lines)


@dataclass(frozen=True)
class LambdaSpec:
    """Self-supervision subset rule.

    ``low_freq_band`` is a half-width: every acquired row in
    ``[H//2 - band, H//2 + band)`` is always selected.
    """

    target_ratio: float = 0.5
    low_freq_band: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_ratio < 1.0:
            raise InvalidInputError("target_ratio must lie in (0, 1)")
        if self.low_freq_band < 0:
            raise InvalidInputError("low_freq_band must be non-negative")
        if self.seed < 0:
            raise InvalidInputError("seed must be non-negative")


@dataclass(frozen=True)
class MaskStats:
    kept_count: int
    kept_ratio: float
    low_freq_coverage: dict[int, float]


def central_rows(height: int, count: int) -> np.ndarray:
    """Indices of the ``count`` rows centred on the DC row."""
    start = height // 2 - count // 2
    return np.arange(start, start + count)


def _band_rows(height: int, half_width: int) -> np.ndarray:
    lo = max(height // 2 - half_width, 0)
    hi = min(height // 2 + half_width, height)
    return np.arange(lo, hi)


def _rows_to_mask(rows, height, width) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    m[np.asarray(rows, dtype=int)] = True
    return m


def kept_rows(mask) -> np.ndarray:
    """Rows holding at least one kept point, ascending."""
    m = as_mask(mask)
    return np.flatnonzero(m.any(axis=1))


def gen_omega(spec: MaskSpec) -> np.ndarray:
    """Acquisition mask: the ACS block plus randomly drawn or evenly spaced rows."""
    if spec.acceleration > spec.height:
        raise InfeasibleSpecError(
            f"acceleration {spec.acceleration} exceeds height {spec.height}"
        )
    acs = central_rows(spec.height, spec.acs_lines)
    rest = np.setdiff1d(np.arange(spec.height), acs)
    n_extra = spec.n_rows - len(acs)
    if spec.kind == "random-line":
        rng = np.random.default_rng(spec.seed)
        extra = rng.choice(rest, size=n_extra, replace=False)
    else:
        # evenly spaced positions in the non-ACS rows, offset drawn from the seed
        step = len(rest) / n_extra if n_extra else 0.0
        offset = np.random.default_rng(spec.seed).random() * step if n_extra else 0.0
        idx = np.floor(offset + step * np.arange(n_extra)).astype(int)
        extra = rest[np.minimum(idx, len(rest) - 1)]
    return _rows_to_mask(np.concatenate([acs, extra]), spec.height, spec.width)


def gen_lambda(omega, spec: LambdaSpec) -> np.ndarray:
    """Select roughly ``target_ratio`` of the acquired rows as network input.

    Every acquired row inside the central band is taken; the remainder is drawn
    uniformly from the acquired rows outside it.  The result is always a subset
    of ``omega`` (row selection intersected with ``omega``).
    """
    om = as_mask(omega)
    height = om.shape[0]
    if spec.low_freq_band > height / 2:
        raise InvalidInputError("low_freq_band exceeds height / 2")
    rows = kept_rows(om)
    band = np.intersect1d(rows, _band_rows(height, spec.low_freq_band))
    high = np.setdiff1d(rows, band)
    target = round_half_up(spec.target_ratio * len(rows))
    if target < len(band):
        raise InfeasibleRatioError(
            f"target of {target} rows cannot hold the {len(band)} mandatory "
            "low-frequency rows; shrink low_freq_band"
        )
    if target < 1:
        raise InfeasibleRatioError("target row count is zero")
    rng = np.random.default_rng(spec.seed)
    picked = rng.choice(high, size=target - len(band), replace=False)
    sel = _rows_to_mask(np.concatenate([band, picked]), height, om.shape[1])
    return sel & om


def gen_mask_bank(base: MaskSpec, count: int, seed: int) -> list[np.ndarray]:
    """``count`` pairwise-distinct masks sharing the acceleration and ACS of ``base``.

    The first mask is ``gen_omega(base)`` with its seed replaced by ``seed``.
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    bank = [gen_omega(replace(base, seed=seed))]
    attempt = 0
    while len(bank) < count:
        attempt += 1
        if attempt > _MAX_BANK_ATTEMPTS:
            raise InfeasibleSpecError(
                f"could not draw {count} distinct masks from {base}"
            )
        m = gen_omega(replace(base, seed=derive_seed(seed, attempt)))
        if not any(np.array_equal(m, b) for b in bank):
            bank.append(m)
    return bank


def mask_stats(mask, bands=(4, 8)) -> MaskStats:
    """Kept count, kept ratio and coverage of central row bands (given as half-widths)."""
    m = as_mask(mask)
    kept = int(m.sum())
    coverage = {}
    for b in bands:
        rows = _band_rows(m.shape[0], int(b))
        coverage[int(b)] = float(m[rows].mean()) if len(rows) else 1.0
    return MaskStats(kept, kept / m.size, coverage)


def rows_to_text(mask) -> str:
    """Plain-text row list: a ``height width`` header then one kept row per line."""
    m = as_mask(mask)
    rows = kept_rows(m)
    if not np.array_equal(_rows_to_mask(rows, *m.shape), m):
        raise InvalidInputError("row-list format only represents line masks")
    return f"{m.shape[0]} {m.shape[1]}\n" + "".join(f"{r}\n" for r in rows)


def rows_from_text(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty row list")
    height, width = (int(v) for v in lines[0].split())
    return _rows_to_mask([int(v) for v in lines[1:]], height, width)
