"""On-disk tensor archive: JSON manifest plus raw float32 blobs.

An archive is a directory holding ``manifest.json`` and one ``<var>.f32``
blob per variable, little-endian IEEE-754 float32, row-major
[time, level, lat, lon]. This is the interchange format for every corpus
in the package; round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, CorruptionError, FormatError
from .grid import CHANNELS, N_CHANNELS, PHYSICAL_CHANNELS, AtmosphericState, SigmaGrid

__all__ = [
    "MANIFEST_NAME",
    "FORMAT_VERSION",
    "TensorArchive",
    "ArchiveView",
    "SplitSpec",
    "write_archive",
    "read_archive",
    "split_chronological",
]

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def write_archive(
    states: Sequence[AtmosphericState],
    path,
    meta: dict | None = None,
) -> dict:
    """Write time-ordered states to ``path`` and return the manifest.

    The three physical channels become one blob each, named after the
    state's channel names; the auxiliary channel is derived data and is not
    stored. The archive directory is created, but its parent must exist.
    """
    if not states:
        raise ContractError("cannot write an empty archive")
    grid = states[0].grid
    names = states[0].channels[:PHYSICAL_CHANNELS]
    times = []
    for s in states:
        if s.grid != grid:
            raise ContractError("states must share one grid")
        times.append(float(s.time))
    t = np.asarray(times)
    if len(t) > 1 and not (np.diff(t) > 0).all():
        raise ContractError("state timestamps must be strictly increasing")

    path = Path(path)
    try:
        path.mkdir(exist_ok=True)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"cannot create archive at {path}: parent missing") from exc

    shape = [len(states), grid.n_levels, grid.n_lat, grid.n_lon]
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "endianness": "little",
        "axes": ["time", "level", "lat", "lon"],
        "variables": list(names),
        "shape": shape,
        "sigmas": [float(s) for s in grid.sigmas],
        "times": times,
        "meta": meta or {},
    }
    for c, name in enumerate(names):
        block = np.stack([s.values[..., c] for s in states]).astype("<f4")
        (path / f"{name}.f32").write_bytes(block.tobytes())
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


@dataclass
class TensorArchive:
    """Handle on an archive directory with a validated manifest."""

    path: Path
    manifest: dict

    @classmethod
    def open(cls, path) -> "TensorArchive":
        path = Path(path)
        mpath = path / MANIFEST_NAME
        if not mpath.exists():
            raise FileNotFoundError(f"no archive manifest at {mpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath}: manifest is not valid JSON: {exc}") from exc
        if manifest.get("dtype") != "float32" or manifest.get("endianness") != "little":
            raise FormatError(
                f"{mpath}: unsupported dtype/endianness "
                f"{manifest.get('dtype')}/{manifest.get('endianness')}"
            )
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"{mpath}: format_version {manifest.get('format_version')} "
                f"(reader supports {FORMAT_VERSION})"
            )
        shape = manifest["shape"]
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        for name in manifest["variables"]:
            blob = path / f"{name}.f32"
            if not blob.exists():
                raise CorruptionError(f"missing blob for variable {name!r} at {blob}")
            actual = blob.stat().st_size
            if actual != expected:
                raise CorruptionError(
                    f"blob for variable {name!r} has {actual} bytes, expected {expected}"
                )
        return cls(path=path, manifest=manifest)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.manifest["times"], dtype=np.float64)

    @property
    def sigmas(self) -> tuple[float, ...]:
        return tuple(self.manifest["sigmas"])

    @property
    def grid(self) -> SigmaGrid:
        _, _, h, w = self.manifest["shape"]
        return SigmaGrid(sigmas=self.sigmas, n_lat=h, n_lon=w)

    @property
    def n_times(self) -> int:
        return int(self.manifest["shape"][0])

    def values(self) -> np.ndarray:
        """Full block [time, level, lat, lon, channel] with aux channel zero."""
        shape = tuple(self.manifest["shape"])
        out = np.zeros(shape + (N_CHANNELS,), dtype=np.float32)
        for c, name in enumerate(self.manifest["variables"]):
            raw = (self.path / f"{name}.f32").read_bytes()
            out[..., c] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return out

    def state(self, index: int) -> AtmosphericState:
        shape = tuple(self.manifest["shape"])
        grid = self.grid
        per_state = int(np.prod(shape[1:], dtype=np.int64))
        values = np.zeros(shape[1:] + (N_CHANNELS,), dtype=np.float32)
        for c, name in enumerate(self.manifest["variables"]):
            with open(self.path / f"{name}.f32", "rb") as fh:
                fh.seek(index * per_state * 4)
                raw = fh.read(per_state * 4)
            values[..., c] = np.frombuffer(raw, dtype="<f4").reshape(shape[1:])
        return AtmosphericState(
            values=values, grid=grid, time=float(self.times[index]), channels=CHANNELS
        )

    def iter_states(
        self, time_window: tuple[float, float] | None = None
    ) -> Iterator[AtmosphericState]:
        times = self.times
        for i in range(self.n_times):
            if time_window is not None:
                lo, hi = time_window
                if not (lo <= times[i] < hi):
                    continue
            yield self.state(i)

    def pair_indices(self) -> list[tuple[int, int]]:
        """Supervision pairs (t, t+1) that do not cross trajectory bounds."""
        spt = self.manifest["meta"].get("snapshots_per_traj")
        n = self.n_times
        if spt:
            return [(i, i + 1) for i in range(n - 1) if (i + 1) % int(spt) != 0]
        return [(i, i + 1) for i in range(n - 1)]


def read_archive(path, time_window: tuple[float, float] | None = None) -> list[AtmosphericState]:
    """Eagerly load states in time order, optionally windowed by sol."""
    return list(TensorArchive.open(path).iter_states(time_window))


@dataclass(frozen=True)
class SplitSpec:
    """Half-open sol intervals for the train/validation split."""

    train_range: tuple[float, float]
    val_range: tuple[float, float]

    def __post_init__(self) -> None:
        t0, t1 = self.train_range
        v0, v1 = self.val_range
        if not (t0 < t1 and v0 < v1):
            raise ContractError("split ranges must be non-empty half-open intervals")
        if t1 > v0:
            raise ContractError(
                f"train range must precede validation range, got train end {t1} "
                f"> val start {v0}"
            )


@dataclass
class ArchiveView:
    """A chronologically contiguous subset of an archive."""

    archive: TensorArchive
    indices: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.archive.times[self.indices]

    def __len__(self) -> int:
        return len(self.indices)

    def state(self, k: int) -> AtmosphericState:
        return self.archive.state(int(self.indices[k]))

    def pair_indices(self) -> list[tuple[int, int]]:
        """Archive-level (t, t+1) pairs whose endpoints both lie in the view."""
        inside = set(int(i) for i in self.indices)
        return [
            (i, j) for i, j in self.archive.pair_indices() if i in inside and j in inside
        ]


def split_chronological(
    archive: TensorArchive, spec: SplitSpec
) -> tuple[ArchiveView, ArchiveView]:
    """Partition an archive's samples by sol interval, leak-free."""
    times = archive.times
    t0, t1 = spec.train_range
    v0, v1 = spec.val_range
    train_idx = np.nonzero((times >= t0) & (times < t1))[0]
    val_idx = np.nonzero((times >= v0) & (times < v1))[0]
    return ArchiveView(archive, train_idx), ArchiveView(archive, val_idx)
