"""Atmospheric data model: channel layout, scaling, regridding, sparsification.

Model space is a fixed 4-channel layout per level: temperature, eastward
wind, northward wind, and an auxiliary channel that is zero for dense data
and carries the presence mask (1 = data present) for sparsified samples.
Scaling statistics are per channel and per level, never per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import ContractError

__all__ = [
    "CHANNELS",
    "N_CHANNELS",
    "PHYSICAL_CHANNELS",
    "SigmaGrid",
    "AtmosphericState",
    "ScalerStats",
    "MaskPattern",
    "to_model_channels",
    "fit_scaler",
    "apply_scaler",
    "regrid_spline",
    "sparsify_columns",
]

CHANNELS = ("T", "u", "v", "aux")
N_CHANNELS = 4
PHYSICAL_CHANNELS = 3  # channels 0..2 carry physics; channel 3 is the mask slot
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SigmaGrid:
    """Vertical sigma coordinates plus the horizontal pixel counts."""

    sigmas: tuple[float, ...]
    n_lat: int
    n_lon: int

    def __post_init__(self) -> None:
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.size == 0:
            raise ContractError("sigma list is empty")
        if not ((s > 0.0).all() and (s <= 1.0).all()):
            raise ContractError(f"sigma values must lie in (0, 1], got {self.sigmas}")
        if s.size > 1 and not (np.diff(s) < 0).all():
            raise ContractError("sigma values must be strictly decreasing (surface first)")
        if self.n_lat < 2 or self.n_lon < 2:
            raise ContractError("grid needs at least 2 pixels per axis")

    @property
    def n_levels(self) -> int:
        return len(self.sigmas)


@dataclass
class AtmosphericState:
    """One timestamped field block, shaped [level, lat, lon, channel]."""

    values: np.ndarray
    grid: SigmaGrid
    time: float
    channels: tuple[str, ...] = CHANNELS

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ContractError(f"state values must be 4D, got shape {self.values.shape}")
        d, h, w, c = self.values.shape
        if c != N_CHANNELS:
            raise ContractError(f"model space has exactly {N_CHANNELS} channels, got {c}")
        if (d, h, w) != (self.grid.n_levels, self.grid.n_lat, self.grid.n_lon):
            raise ContractError(
                f"values shape {self.values.shape[:3]} does not match grid "
                f"({self.grid.n_levels}, {self.grid.n_lat}, {self.grid.n_lon})"
            )
        if not np.isfinite(self.values).all():
            raise ContractError("state contains non-finite entries")

    def copy(self) -> "AtmosphericState":
        return replace(self, values=self.values.copy())


@dataclass(frozen=True)
class ScalerStats:
    """Per-(channel, level) mean/std for the three physical channels."""

    mean: np.ndarray  # [PHYSICAL_CHANNELS, n_levels]
    std: np.ndarray   # same shape, clamped to >= STD_FLOOR
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 2:
            raise ContractError("scaler mean/std must share shape [channel, level]")
        if self.mean.shape[0] != PHYSICAL_CHANNELS:
            raise ContractError(f"scaler covers {PHYSICAL_CHANNELS} physical channels")
        if (self.std < STD_FLOOR).any():
            raise ContractError(f"std entries must be clamped to >= {STD_FLOOR}")

    @property
    def n_levels(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class MaskPattern:
    """Kept lat/lon columns plus the equivalent binary presence field."""

    kept: np.ndarray        # [n_kept, 2] (lat, lon) indices
    mask_field: np.ndarray  # [n_lat, n_lon], 1 = present
    ratio: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise ContractError(f"drop ratio must lie in [0, 1], got {self.ratio}")
        n_expected = int(round((1.0 - self.ratio) * self.mask_field.size))
        if len(self.kept) != n_expected:
            raise ContractError(
                f"kept-count {len(self.kept)} != round((1-ratio)*N) = {n_expected}"
            )
        field = np.zeros_like(self.mask_field)
        if len(self.kept):
            field[self.kept[:, 0], self.kept[:, 1]] = 1.0
        if not np.array_equal(field, self.mask_field):
            raise ContractError("mask_field disagrees with kept index set")


def to_model_channels(
    T: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    sigmas: Sequence[float],
    mask: MaskPattern | None = None,
    time: float = 0.0,
) -> AtmosphericState:
    """Pack raw per-level T/u/v fields into the 4-channel model layout.

    Channel 3 is zero for dense data; with a mask it carries the binary
    presence field broadcast over every level.
    """
    T, u, v = (np.asarray(a, dtype=np.float32) for a in (T, u, v))
    if not (T.shape == u.shape == v.shape) or T.ndim != 3:
        raise ContractError(f"T/u/v must share a [level, lat, lon] shape, got {T.shape}")
    d, h, w = T.shape
    values = np.zeros((d, h, w, N_CHANNELS), dtype=np.float32)
    values[..., 0] = T
    values[..., 1] = u
    values[..., 2] = v
    if mask is not None:
        if mask.mask_field.shape != (h, w):
            raise ContractError(
                f"mask shape {mask.mask_field.shape} does not match grid ({h}, {w})"
            )
        values[..., 3] = mask.mask_field[None, :, :]
    grid = SigmaGrid(sigmas=tuple(float(s) for s in sigmas), n_lat=h, n_lon=w)
    return AtmosphericState(values=values, grid=grid, time=time)


def fit_scaler(training_block: np.ndarray, source: str = "train") -> ScalerStats:
    """Population mean/std per (channel, level) over time, lat and lon.

    ``training_block`` is shaped [time, level, lat, lon, channel]; only the
    physical channels enter the statistics. Std is clamped to STD_FLOOR.
    """
    block = np.asarray(training_block, dtype=np.float64)
    if block.ndim != 5 or block.size == 0:
        raise ContractError(f"training block must be non-empty 5D, got shape {block.shape}")
    if not np.isfinite(block).all():
        raise ContractError("training block contains non-finite entries")
    phys = block[..., :PHYSICAL_CHANNELS]
    mean = phys.mean(axis=(0, 2, 3)).T          # [channel, level]
    std = phys.std(axis=(0, 2, 3), ddof=0).T
    std = np.maximum(std, STD_FLOOR)
    return ScalerStats(mean=mean, std=std, source=source)


def apply_scaler(
    state: AtmosphericState | np.ndarray,
    stats: ScalerStats,
    direction: str = "forward",
) -> AtmosphericState | np.ndarray:
    """Standard-scale the physical channels; channel 3 passes through.

    ``forward`` maps x to (x - mean) / std per channel and level; ``inverse``
    is its exact inverse. Accepts a state or a bare [..., level, lat, lon,
    channel] array and returns the same kind.
    """
    if direction not in ("forward", "inverse"):
        raise ContractError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    values = state.values if isinstance(state, AtmosphericState) else np.asarray(state)
    if values.ndim < 4:
        raise ContractError(f"expected [..., level, lat, lon, channel], got {values.shape}")
    n_levels = values.shape[-4]
    if values.shape[-1] != N_CHANNELS:
        raise ContractError(f"expected {N_CHANNELS} channels, got {values.shape[-1]}")
    if stats.n_levels != n_levels:
        raise ContractError(
            f"scaler covers {stats.n_levels} levels but state has {n_levels}"
        )
    # broadcast shape [level, 1, 1] per channel
    mean = stats.mean.astype(values.dtype)[:, :, None, None]
    std = stats.std.astype(values.dtype)[:, :, None, None]
    out = values.copy()
    phys = np.moveaxis(out[..., :PHYSICAL_CHANNELS], -1, -4)  # [..., channel, level, lat, lon]
    if direction == "forward":
        phys[:] = (phys - mean) / std
    else:
        phys[:] = phys * std + mean
    if isinstance(state, AtmosphericState):
        return replace(state, values=out)
    return out


def regrid_spline(
    field: np.ndarray,
    target: tuple[int, int],
    order: int = 3,
) -> np.ndarray:
    """Tensor-product spline regrid of one [lat, lon] field.

    Longitude is periodic (wrap padding); latitude evaluation is clamped at
    the poleward nodes. Interpolates exactly at input nodes when the output
    grid shares them.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ContractError(f"field must be [lat, lon], got shape {field.shape}")
    n_lat, n_lon = field.shape
    lat_out, lon_out = target
    if order < 1:
        raise ContractError(f"spline order must be >= 1, got {order}")
    if n_lat < order + 1 or n_lon < order + 1:
        raise ContractError(
            f"need at least order+1 = {order + 1} samples per axis, got {field.shape}"
        )
    if lat_out < 1 or lon_out < 1:
        raise ContractError(f"target shape must be positive, got {target}")

    # latitude nodes at cell centres of [0, 1]; longitude nodes at cell edges
    # of the periodic interval [0, 1)
    lat_in = (np.arange(n_lat) + 0.5) / n_lat
    lon_in = np.arange(n_lon) / n_lon
    pad = order + 1
    lon_ext = np.concatenate([lon_in[-pad:] - 1.0, lon_in, lon_in[:pad] + 1.0])
    field_ext = np.concatenate([field[:, -pad:], field, field[:, :pad]], axis=1)

    spline = RectBivariateSpline(lat_in, lon_ext, field_ext, kx=order, ky=order, s=0)
    lat_eval = np.clip((np.arange(lat_out) + 0.5) / lat_out, lat_in[0], lat_in[-1])
    lon_eval = np.arange(lon_out) / lon_out
    return spline(lat_eval, lon_eval)


def sparsify_columns(
    state: AtmosphericState,
    ratio: float,
    seed: int,
) -> tuple[AtmosphericState, MaskPattern]:
    """Drop whole vertical columns uniformly at random.

    Keeps round((1-ratio)*N) columns chosen without replacement under
    ``seed``. Dropped columns have physical channels zeroed on all levels
    (the per-channel-level mean in scaled space); channel 3 carries the
    binary presence mask everywhere.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"drop ratio must lie in [0, 1], got {ratio}")
    h, w = state.grid.n_lat, state.grid.n_lon
    n_total = h * w
    n_keep = int(round((1.0 - ratio) * n_total))
    rng = np.random.default_rng(seed)
    kept_flat = np.sort(rng.choice(n_total, size=n_keep, replace=False))
    mask_field = np.zeros((h, w), dtype=np.float32)
    mask_field.reshape(-1)[kept_flat] = 1.0
    kept = np.stack(np.unravel_index(kept_flat, (h, w)), axis=1)

    values = state.values.copy()
    values[..., :PHYSICAL_CHANNELS] *= mask_field[None, :, :, None]
    values[..., 3] = mask_field[None, :, :]
    pattern = MaskPattern(kept=kept, mask_field=mask_field, ratio=ratio)
    return replace(state, values=values), pattern
