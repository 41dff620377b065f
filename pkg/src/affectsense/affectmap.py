"""Cube-grid accumulation of aligned (position, emotion) samples and rendering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import GridSpec

ZERO_VISIT_RGB = (128, 128, 128)


@dataclass(frozen=True)
class AffectGrid:
    spec: GridSpec
    visits: np.ndarray
    valence_sum: np.ndarray
    dwell_seconds: np.ndarray

    @classmethod
    def empty(cls, spec: GridSpec) -> "AffectGrid":
        shape = tuple(spec.dims)
        return cls(spec, np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape))

    def __post_init__(self):
        shape = tuple(self.spec.dims)
        for name in ("visits", "valence_sum", "dwell_seconds"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape must equal grid dims {shape}")

    def copy(self) -> "AffectGrid":
        return AffectGrid(self.spec, self.visits.copy(), self.valence_sum.copy(), self.dwell_seconds.copy())

    def mean_valence(self) -> np.ndarray:
        """Mean valence per cell; NaN where unvisited."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.visits > 0, self.valence_sum / np.maximum(self.visits, 1), np.nan)

    def flattened(self) -> "AffectGrid":
        """Single-layer grid with visits, valence and dwell summed over z."""
        spec = GridSpec(self.spec.origin, self.spec.cell_size, (self.spec.dims[0], self.spec.dims[1], 1))
        return AffectGrid(
            spec,
            self.visits.sum(axis=2, keepdims=True),
            self.valence_sum.sum(axis=2, keepdims=True),
            self.dwell_seconds.sum(axis=2, keepdims=True),
        )


@dataclass(frozen=True)
class HeatmapImage:
    width: int
    height: int
    pixels: bytes  # row-major RGB

    def __post_init__(self):
        if len(self.pixels) != 3 * self.width * self.height:
            raise ValueError("pixel buffer size does not match width x height")

    def to_ppm(self) -> bytes:
        return b"P6\n%d %d\n255\n" % (self.width, self.height) + self.pixels

    def pixel(self, x: int, y: int) -> tuple[int, int, int]:
        k = 3 * (y * self.width + x)
        return self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]


def accumulate(grid: AffectGrid, samples: Sequence) -> tuple[AffectGrid, int]:
    """Add aligned samples to a copy of ``grid``.

    Dwell credited to a sample is the gap since the previous sample in
    ``samples`` (zero for the first). Samples outside the grid are counted
    and otherwise ignored.
    """
    out = grid.copy()
    dropped = 0
    prev_t = None
    for s in samples:
        gap = 0.0 if prev_t is None else max(0.0, s.timestamp - prev_t)
        prev_t = s.timestamp
        idx = grid.spec.cell_index(s.position)
        if idx is None:
            dropped += 1
            continue
        out.visits[idx] += 1
        out.valence_sum[idx] += s.emotion.valence
        out.dwell_seconds[idx] += gap
    return out, dropped


def valence_rgb(v: float) -> tuple[int, int, int]:
    """Blue (-1) through white (0) to red (+1), linear on each half."""
    v = min(1.0, max(-1.0, float(v)))
    if v < 0:
        c = int(round(255.0 * (1.0 + v)))
        return c, c, 255
    c = int(round(255.0 * (1.0 - v)))
    return 255, c, c


def occupancy_rgb(fraction: float) -> tuple[int, int, int]:
    c = int(round(255.0 * (1.0 - min(1.0, max(0.0, fraction)))))
    return 255, c, c


def _layer(grid: AffectGrid, slice_: int | str) -> AffectGrid:
    if slice_ == "flatten":
        return grid.flattened()
    nz = grid.spec.dims[2]
    if isinstance(slice_, bool) or not isinstance(slice_, (int, np.integer)) or not 0 <= slice_ < nz:
        raise ValueError(f"slice must be 'flatten' or a z index in [0, {nz}), got {slice_!r}")
    k = int(slice_)
    spec = GridSpec(grid.spec.origin, grid.spec.cell_size, (grid.spec.dims[0], grid.spec.dims[1], 1))
    return AffectGrid(
        spec, grid.visits[:, :, k : k + 1], grid.valence_sum[:, :, k : k + 1], grid.dwell_seconds[:, :, k : k + 1]
    )


def render_heatmap(
    grid: AffectGrid, slice_: int | str = "flatten", channel: str = "valence", scale_px: int = 1
) -> HeatmapImage:
    """Top-down image of one z layer (or all layers merged); north (max y) up."""
    if scale_px < 1:
        raise ValueError("scale_px must be >= 1")
    layer = _layer(grid, slice_)
    visits = layer.visits[:, :, 0]
    nx, ny = visits.shape
    colours = np.empty((nx, ny, 3), dtype=np.uint8)
    if channel == "valence":
        means = layer.mean_valence()[:, :, 0]
        for i in range(nx):
            for j in range(ny):
                colours[i, j] = ZERO_VISIT_RGB if visits[i, j] == 0 else valence_rgb(means[i, j])
    elif channel == "occupancy":
        peak = visits.max()
        for i in range(nx):
            for j in range(ny):
                colours[i, j] = occupancy_rgb(visits[i, j] / peak if peak > 0 else 0.0)
    else:
        raise ValueError(f"unknown channel {channel!r}")
    # image rows run from max y down; columns follow x
    img = colours.transpose(1, 0, 2)[::-1]
    img = np.repeat(np.repeat(img, scale_px, axis=0), scale_px, axis=1)
    return HeatmapImage(nx * scale_px, ny * scale_px, img.tobytes())


def export_csv(grid: AffectGrid) -> bytes:
    lines = ["i,j,k,visits,mean_valence,dwell_seconds"]
    for i, j, k in zip(*np.nonzero(grid.visits)):  # C order == sorted (i, j, k)
        v = int(grid.visits[i, j, k])
        lines.append(
            f"{i},{j},{k},{v},{grid.valence_sum[i, j, k] / v:.6f},{grid.dwell_seconds[i, j, k]:.6f}"
        )
    return ("\n".join(lines) + "\n").encode("ascii")


def region_mean_valence(grid: AffectGrid, lo: Sequence[float], hi: Sequence[float]) -> float:
    """Average of the flattened per-cell mean valence over visited cells whose
    centres lie in the xy box (what the heatmap shows for that region)."""
    flat = grid.flattened()
    spec = flat.spec
    cs = spec.cell_size
    xs = spec.origin[0] + (np.arange(spec.dims[0]) + 0.5) * cs
    ys = spec.origin[1] + (np.arange(spec.dims[1]) + 0.5) * cs
    mx = (xs >= lo[0]) & (xs <= hi[0])
    my = (ys >= lo[1]) & (ys <= hi[1])
    sel = np.outer(mx, my)
    means = flat.mean_valence()[:, :, 0][sel & (flat.visits[:, :, 0] > 0)]
    return float(means.mean()) if means.size else float("nan")
