"""Static world description: floor bounds, obstacles, anchors and the cube grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CELL_SIZE = 0.5
GEOMETRY_TOL = 1e-9


class SceneError(ValueError):
    """Raised for malformed scene files or violated scene invariants."""


class DegenerateGeometryError(ValueError):
    """Anchor layout (or anchor/point configuration) cannot determine a position."""


def _vec3(value, name: str) -> tuple[float, float, float]:
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{name}: expected 3 numbers") from exc
    if len(out) != 3 or not all(math.isfinite(v) for v in out):
        raise SceneError(f"{name}: expected 3 finite numbers")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class Box:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def contains_box(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.min, other.min)) and all(
            a >= b for a, b in zip(self.max, other.max)
        )


@dataclass(frozen=True)
class FloorPlan:
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    obstacles: tuple[Box, ...] = ()

    def __post_init__(self):
        if not all(lo < hi for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise SceneError("bounds: min must be < max on every axis")
        outer = Box(self.bounds_min, self.bounds_max)
        for i, ob in enumerate(self.obstacles):
            if not all(lo <= hi for lo, hi in zip(ob.min, ob.max)):
                raise SceneError(f"obstacles[{i}]: min must be <= max")
            if not outer.contains_box(ob):
                raise SceneError(f"obstacles[{i}]: obstacle outside bounds")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.bounds_min), np.array(self.bounds_max)

    def contains(self, point: Sequence[float], tol: float = 1e-9) -> bool:
        p = np.asarray(point, dtype=float)
        lo, hi = self.bounds
        return bool(np.all(p >= lo - tol) and np.all(p <= hi + tol))


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchors; ``ids[i]`` sits at ``positions[i]``."""

    ids: tuple[str, ...]
    positions: np.ndarray = field(repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[0] != len(self.ids) or pos.shape[1] not in (2, 3):
            raise SceneError("anchors: positions must be an (n, 2) or (n, 3) array matching ids")
        if len(set(self.ids)) != len(self.ids):
            raise SceneError("anchors: ids must be unique")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Sequence[float]]]) -> "AnchorSet":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), np.array([p[1] for p in pairs], dtype=float))

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, anchor_id: str) -> int:
        try:
            return self.ids.index(anchor_id)
        except ValueError:
            raise KeyError(f"unknown anchor id {anchor_id!r}") from None


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if not self.cell_size > 0:
            raise SceneError("cell_size must be > 0")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise SceneError("dims must be 3 integers >= 1")

    @property
    def extent_max(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * self.cell_size

    def cell_index(self, point: Sequence[float]) -> tuple[int, int, int] | None:
        """Cell containing ``point`` or None when outside the grid.

        The upper grid face is inclusive so points on the far bounds map to the
        last cell.
        """
        rel = (np.asarray(point, dtype=float) - self.origin) / self.cell_size
        idx = np.floor(rel).astype(np.int64)
        dims = np.asarray(self.dims)
        on_upper = (idx == dims) & (rel <= dims + 1e-9)
        idx = np.where(on_upper, dims - 1, idx)
        if np.any(idx < 0) or np.any(idx >= dims):
            return None
        return int(idx[0]), int(idx[1]), int(idx[2])


@dataclass(frozen=True)
class Scene:
    """Everything parsed from a scene JSON file."""

    floorplan: FloorPlan
    anchors: AnchorSet | None
    cell_size: float = DEFAULT_CELL_SIZE

    def grid(self, cell_size: float | None = None) -> GridSpec:
        return derive_grid(self.floorplan.bounds, cell_size or self.cell_size)


def parse_scene(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise SceneError("scene: top level must be a JSON object")
    try:
        bounds = doc["bounds"]
        bmin = _vec3(bounds["min"], "bounds.min")
        bmax = _vec3(bounds["max"], "bounds.max")
    except (KeyError, TypeError) as exc:
        raise SceneError("bounds: missing min/max") from exc
    obstacles = []
    for i, ob in enumerate(doc.get("obstacles", [])):
        try:
            obstacles.append(Box(_vec3(ob["min"], f"obstacles[{i}].min"), _vec3(ob["max"], f"obstacles[{i}].max")))
        except (KeyError, TypeError) as exc:
            raise SceneError(f"obstacles[{i}]: missing min/max") from exc
    plan = FloorPlan(bmin, bmax, tuple(obstacles))

    anchors = None
    if doc.get("anchors"):
        pairs = []
        for i, a in enumerate(doc["anchors"]):
            try:
                pairs.append((str(a["id"]), _vec3(a["pos"], f"anchors[{i}].pos")))
            except (KeyError, TypeError) as exc:
                raise SceneError(f"anchors[{i}]: missing id/pos") from exc
        anchors = AnchorSet.from_pairs(pairs)

    cell_size = doc.get("cell_size", DEFAULT_CELL_SIZE)
    if not isinstance(cell_size, (int, float)) or not cell_size > 0:
        raise SceneError("cell_size: must be a positive number")
    return Scene(plan, anchors, float(cell_size))


def load_scene(path: str | Path) -> Scene:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: parse error: {exc}") from exc
    return parse_scene(doc)


def load_floorplan(path: str | Path) -> FloorPlan:
    return load_scene(path).floorplan


def load_pointcloud(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of an ``x y z`` point file."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    count = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 3:
                raise SceneError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
            try:
                p = np.array([float(t) for t in tokens])
            except ValueError:
                raise SceneError(f"{path}:{lineno}: non-numeric token") from None
            if not np.all(np.isfinite(p)):
                raise SceneError(f"{path}:{lineno}: non-finite coordinate")
            np.minimum(lo, p, out=lo)
            np.maximum(hi, p, out=hi)
            count += 1
    if count == 0:
        raise SceneError(f"{path}: empty point cloud")
    return lo, hi


def derive_grid(bounds: tuple[Sequence[float], Sequence[float]], cell_size: float = DEFAULT_CELL_SIZE) -> GridSpec:
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if not cell_size > 0:
        raise SceneError(f"cell_size must be > 0, got {cell_size}")
    extent = hi - lo
    if np.any(extent <= 0):
        raise SceneError("degenerate bounds: every axis needs positive extent")
    # slack keeps exact multiples (e.g. 1.1/0.1) from gaining a cell
    dims = tuple(int(math.ceil(e / cell_size - 1e-9)) for e in extent)
    return GridSpec(tuple(float(v) for v in lo), float(cell_size), dims)  # type: ignore[arg-type]


def _positions(anchors: AnchorSet | np.ndarray) -> np.ndarray:
    if isinstance(anchors, AnchorSet):
        return anchors.positions
    return np.asarray(anchors, dtype=float)


def validate_anchor_geometry(anchors: AnchorSet | np.ndarray, dimension: int) -> str:
    """Return ``"ok"`` or ``"degenerate"`` for the anchor layout.

    Degenerate means the centred anchor coordinates span fewer than
    ``dimension`` directions: the smallest-to-largest singular value ratio is
    below 1e-9 (collinear in 2D, coplanar in 3D).
    """
    if dimension not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    pos = _positions(anchors)
    if pos.shape[0] < dimension + 1:
        raise DegenerateGeometryError(f"need ≥{dimension + 1} anchors for {dimension}D, got {pos.shape[0]}")
    if pos.shape[1] < dimension:
        raise ValueError(f"anchor coordinates have {pos.shape[1]} components, need {dimension}")
    centred = pos[:, :dimension] - pos[:, :dimension].mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0.0 or sv[dimension - 1] / sv[0] < GEOMETRY_TOL:
        return "degenerate"
    return "ok"
