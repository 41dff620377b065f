"""Position solvers for UWB ranging: closed-form trilateration, Gauss-Newton
multilateration (ToA), TDoA, a particle-filter tracker and GDOP.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .scene import AnchorSet, DegenerateGeometryError, validate_anchor_geometry

log = logging.getLogger(__name__)

TAG_HEIGHT = 1.2
MAX_ITER = 100
STEP_TOL = 1e-9
MAX_HALVINGS = 20
DAMPING = 1e-8
GATE_SIGMAS = 5.0
UNDERFLOW_RESIDUAL = 1e9
# smallest log-likelihood whose exp() is still a normal double
_LOG_TINY = float(np.log(np.finfo(float).tiny))


class Method(str, Enum):
    CLOSED_FORM = "closed_form"
    GAUSS_NEWTON = "gauss_newton"
    TDOA = "tdoa"
    PARTICLE_FILTER = "particle_filter"


@dataclass(frozen=True)
class RangeMeasurement:
    tag_id: str
    anchor_id: str
    timestamp: float
    distance: float
    sigma: float

    def __post_init__(self):
        if not self.distance >= 0:
            raise ValueError(f"distance must be >= 0, got {self.distance}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class PositionEstimate:
    timestamp: float
    position: np.ndarray
    residual_norm: float
    iterations: int
    method: Method
    cost_history: tuple[float, ...] = field(default=(), repr=False)
    flagged: bool = False
    gated: int = 0


@dataclass(frozen=True)
class ParticleSet:
    positions: np.ndarray
    weights: np.ndarray
    rng_seed: int
    step: int = 0

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.positions) != len(self.weights):
            raise ValueError("particle set must be non-empty with one weight per particle")
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("particle weights must be >= 0 and sum to 1")

    def __len__(self) -> int:
        return len(self.weights)


def _anchor_array(anchors: AnchorSet | np.ndarray) -> np.ndarray:
    if isinstance(anchors, AnchorSet):
        return anchors.positions
    return np.asarray(anchors, dtype=float)


def trilaterate_closed_form(anchors, distances) -> np.ndarray:
    """Intersect three circles by differencing against the first one."""
    a = _anchor_array(anchors)[:, :2]
    d = np.asarray(distances, dtype=float)
    if a.shape != (3, 2) or d.shape != (3,):
        raise ValueError("closed-form trilateration takes exactly 3 anchors and 3 distances")
    if np.any(d < 0):
        raise ValueError("distances must be >= 0")
    if validate_anchor_geometry(a, 2) == "degenerate":
        raise DegenerateGeometryError("anchors are collinear")
    lhs = 2.0 * (a[1:] - a[0])
    rhs = d[0] ** 2 - d[1:] ** 2 + np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)
    return np.linalg.solve(lhs, rhs)


def _solve_normal(jtj: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        if np.linalg.cond(jtj) < 1e14:
            return np.linalg.solve(jtj, rhs)
    except np.linalg.LinAlgError:
        pass
    try:
        step = np.linalg.solve(jtj + DAMPING * np.eye(len(rhs)), rhs)
    except np.linalg.LinAlgError:
        step = None
    if step is None or not np.all(np.isfinite(step)):
        raise DegenerateGeometryError("normal matrix singular")
    return step


def gauss_newton(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    max_iter: int = MAX_ITER,
    step_tol: float = STEP_TOL,
) -> tuple[np.ndarray, int, list[float]]:
    """Minimise ``sum(r**2)`` where ``fun(x) -> (r, J)``.

    Steps that raise the cost are halved up to ``MAX_HALVINGS`` times; if no
    halving helps the iteration stops at the current point. Returns the
    solution, the number of accepted steps and the cost after each of them
    (the first entry is the starting cost).
    """
    x = np.array(x0, dtype=float)
    r, jac = fun(x)
    cost = float(r @ r)
    costs = [cost]
    iterations = 0
    for _ in range(max_iter):
        step = _solve_normal(jac.T @ jac, -(jac.T @ r))
        for _ in range(MAX_HALVINGS + 1):
            x_new = x + step
            r_new, jac_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                break
            step = step * 0.5
        else:
            break
        x, r, jac, cost = x_new, r_new, jac_new, cost_new
        costs.append(cost)
        iterations += 1
        if np.linalg.norm(step) < step_tol:
            break
    return x, iterations, costs


class _Layout:
    """Splits coordinates into solved ("free") axes and fixed-height axes.

    In 2D mode with 3D anchors the tag height is held at ``tag_height`` while
    ranges stay true 3D slant ranges.
    """

    def __init__(self, anchors: np.ndarray, dimension: int | None, tag_height: float):
        self.space = anchors.shape[1]
        self.dimension = self.space if dimension is None else dimension
        if self.dimension not in (2, 3) or self.dimension > self.space:
            raise ValueError(f"cannot solve in {self.dimension}D with {self.space}D anchors")
        self.anchors = anchors
        self.tag_height = tag_height
        self.fixed = np.full(self.space - self.dimension, tag_height)

    def full(self, free: np.ndarray) -> np.ndarray:
        return np.concatenate([free, self.fixed])

    def output(self, free: np.ndarray) -> np.ndarray:
        p = np.full(3, self.tag_height)
        p[: self.dimension] = free
        return p

    def start(self, guess) -> np.ndarray:
        if guess is None:
            return self.anchors[:, : self.dimension].mean(axis=0)
        return np.asarray(guess, dtype=float)[: self.dimension]

    def fixed_offset_sq(self) -> np.ndarray:
        """Squared distance each anchor contributes along the fixed axes."""
        return np.sum((self.fixed - self.anchors[:, self.dimension :]) ** 2, axis=1)


def _unit_rows(p: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = p - anchors
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    safe = np.where(dist > 0, dist, 1.0)
    return dist, diff / safe[:, None]


def _sigma_array(sigmas, n: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(1.0 if sigmas is None else sigmas, dtype=float), (n,)).copy()
    if np.any(s <= 0):
        raise ValueError("sigmas must be > 0")
    return s


def _best_of(starts: Iterable[np.ndarray], fun) -> tuple[np.ndarray, int, list[float]]:
    best = None
    for x0 in starts:
        if x0 is None or not np.all(np.isfinite(x0)):
            continue
        result = gauss_newton(fun, x0)
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    assert best is not None
    return best


def _toa_linear_init(lay: _Layout, dist: np.ndarray) -> np.ndarray | None:
    a = lay.anchors[:, : lay.dimension]
    d_eff_sq = dist**2 - lay.fixed_offset_sq()
    lhs = 2.0 * (a[1:] - a[0])
    rhs = d_eff_sq[0] - d_eff_sq[1:] + np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol


def multilaterate(
    anchors,
    distances,
    initial_guess=None,
    *,
    sigmas=None,
    dimension: int | None = None,
    tag_height: float = TAG_HEIGHT,
    timestamp: float = 0.0,
    gate: bool = True,
) -> PositionEstimate:
    """Weighted least-squares position from anchor ranges.

    Minimises ``sum(((|p - a_i| - d_i) / sigma_i) ** 2)`` by Gauss-Newton.
    Without an explicit ``initial_guess`` the solver starts from the anchor
    centroid and from the linearised least-squares point and keeps the
    lower-cost result. Ranges whose residual exceeds 5 sigma after the first
    solve are dropped once and the solve repeated.
    """
    a = _anchor_array(anchors)
    d = np.asarray(distances, dtype=float)
    lay = _Layout(a, dimension, tag_height)
    dim = lay.dimension
    if a.shape[0] < dim + 1:
        raise DegenerateGeometryError(f"need ≥{dim + 1} anchors for {dim}D, got {a.shape[0]}")
    if d.shape != (a.shape[0],):
        raise ValueError("one distance per anchor required")
    if validate_anchor_geometry(a, dim) == "degenerate":
        raise DegenerateGeometryError("anchors are collinear" if dim == 2 else "anchors are coplanar")
    sig = _sigma_array(sigmas, len(d))

    def solve(mask: np.ndarray, starts):
        am, dm, sm = a[mask], d[mask], sig[mask]

        def fun(free):
            dist, unit = _unit_rows(lay.full(free), am)
            return (dist - dm) / sm, unit[:, :dim] / sm[:, None]

        return _best_of(starts, fun)

    mask = np.ones(len(d), dtype=bool)
    if initial_guess is None:
        starts = [lay.start(None), _toa_linear_init(lay, d)]
    else:
        starts = [lay.start(initial_guess)]
    free, iterations, costs = solve(mask, starts)

    gated = 0
    if gate:
        dist, _ = _unit_rows(lay.full(free), a)
        outliers = np.abs(dist - d) > GATE_SIGMAS * sig
        if outliers.any() and (~outliers).sum() >= dim + 1:
            keep = ~outliers
            if validate_anchor_geometry(a[keep], dim) == "ok":
                mask = keep
                gated = int(outliers.sum())
                free, more, costs2 = solve(mask, [free])
                iterations += more
                costs = costs + costs2[1:]

    dist, _ = _unit_rows(lay.full(free), a[mask])
    rms = float(np.sqrt(np.mean(((dist - d[mask]) / sig[mask]) ** 2)))
    return PositionEstimate(timestamp, lay.output(free), rms, iterations, Method.GAUSS_NEWTON, tuple(costs), gated=gated)


def _tdoa_linear_init(lay: _Layout, dd: np.ndarray) -> np.ndarray | None:
    a = lay.anchors[:, : lay.dimension]
    q = lay.fixed_offset_sq()
    lhs = np.column_stack([-2.0 * (a[1:] - a[0]), -2.0 * dd])
    rhs = dd**2 - np.sum(a[1:] ** 2, axis=1) + np.sum(a[0] ** 2) - q[1:] + q[0]
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol[: lay.dimension]


def tdoa_solve(
    anchors,
    range_differences,
    initial_guess=None,
    *,
    sigmas=None,
    dimension: int | None = None,
    tag_height: float = TAG_HEIGHT,
    timestamp: float = 0.0,
) -> PositionEstimate:
    """Position from range differences ``|p - a_i| - |p - a_0|``, i = 1..n-1.

    Same Gauss-Newton machinery and start-point policy as ``multilaterate``;
    the linear start comes from the range-difference system solved jointly
    for position and the reference range.
    """
    a = _anchor_array(anchors)
    dd = np.asarray(range_differences, dtype=float)
    lay = _Layout(a, dimension, tag_height)
    dim = lay.dimension
    if a.shape[0] < dim + 2:
        raise DegenerateGeometryError(f"need ≥{dim + 2} anchors for TDoA in {dim}D, got {a.shape[0]}")
    if dd.shape != (a.shape[0] - 1,):
        raise ValueError("one range difference per non-reference anchor required")
    if validate_anchor_geometry(a, dim) == "degenerate":
        raise DegenerateGeometryError("anchors are collinear" if dim == 2 else "anchors are coplanar")
    sig = _sigma_array(sigmas, len(dd))

    def fun(free):
        dist, unit = _unit_rows(lay.full(free), a)
        r = (dist[1:] - dist[0] - dd) / sig
        jac = (unit[1:, :dim] - unit[0, :dim]) / sig[:, None]
        return r, jac

    if initial_guess is None:
        starts = [lay.start(None), _tdoa_linear_init(lay, dd)]
    else:
        starts = [lay.start(initial_guess)]
    free, iterations, costs = _best_of(starts, fun)
    r, _ = fun(free)
    rms = float(np.sqrt(np.mean(r**2)))
    return PositionEstimate(timestamp, lay.output(free), rms, iterations, Method.TDOA, tuple(costs))


def gdop(anchors, point) -> float:
    """sqrt(trace((J^T J)^-1)) with J the unit anchor-to-point directions."""
    p = np.asarray(point, dtype=float)
    a = _anchor_array(anchors)[:, : len(p)]
    dist, unit = _unit_rows(p, a)
    if np.any(dist < 1e-12):
        raise DegenerateGeometryError("point coincides with an anchor")
    jtj = unit.T @ unit
    eig = np.linalg.eigvalsh(jtj)
    if eig[0] <= 1e-12 * max(eig[-1], 1.0):
        raise DegenerateGeometryError("singular geometry at this point")
    return float(np.sqrt(np.trace(np.linalg.inv(jtj))))


def init_particles(center, spread: float, n: int, seed: int, dimension: int = 3) -> ParticleSet:
    """Gaussian cloud of ``n`` equally weighted particles around ``center``."""
    rng = np.random.default_rng([seed, 0x5EED])
    pos = np.tile(np.asarray(center, dtype=float), (n, 1))
    pos[:, :dimension] += rng.normal(0.0, spread, size=(n, dimension))
    return ParticleSet(pos, np.full(n, 1.0 / n), seed, 0)


def particle_filter_step(
    state: ParticleSet,
    measurements: Sequence[RangeMeasurement],
    anchors: AnchorSet,
    dt: float,
    *,
    q: float = 0.5,
    dimension: int = 3,
    timestamp: float | None = None,
) -> tuple[ParticleSet, PositionEstimate]:
    """Random-walk predict, range-likelihood update, systematic resample.

    The step's randomness is drawn from a generator keyed on
    ``(rng_seed, step)``, so replaying a step reproduces it bit for bit.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    rng = np.random.default_rng([state.rng_seed, state.step])
    n = len(state)
    pos = np.array(state.positions, dtype=float)
    std = q * dt
    noise = rng.normal(0.0, 1.0, size=(n, dimension))
    if std > 0:
        pos[:, :dimension] += std * noise

    weights = np.array(state.weights, dtype=float)
    flagged = False
    if measurements:
        idx = [anchors.index(m.anchor_id) for m in measurements]
        a = np.ascontiguousarray(anchors.positions[idx])
        dists = np.array([m.distance for m in measurements])
        sig = np.array([m.sigma for m in measurements])
        loglik = kernels.range_loglik(np.ascontiguousarray(pos[:, : a.shape[1]]), a, dists, sig)
        peak = float(np.max(loglik)) if np.all(np.isfinite(loglik)) else -np.inf
        if not peak >= _LOG_TINY:
            flagged = True
            weights = np.full(n, 1.0 / n)
        else:
            with np.errstate(divide="ignore"):
                logw = np.log(weights) + loglik
            w = np.exp(logw - np.max(logw))
            total = w.sum()
            if not (total > 0 and np.isfinite(total)):
                flagged = True
                weights = np.full(n, 1.0 / n)
            else:
                weights = w / total
    weights /= weights.sum()

    est = weights @ pos
    u0 = rng.random()
    ess = 1.0 / float(np.sum(weights**2))
    if ess < n / 2:
        keep = kernels.systematic_resample(np.ascontiguousarray(weights), u0)
        pos = pos[keep]
        weights = np.full(n, 1.0 / n)

    if flagged:
        residual = UNDERFLOW_RESIDUAL
        log.warning("particle weights underflowed; reset to uniform")
    elif measurements:
        d_est, _ = _unit_rows(est[: a.shape[1]], a)
        residual = float(np.sqrt(np.mean(((d_est - dists) / sig) ** 2)))
    else:
        residual = 0.0
    t = timestamp if timestamp is not None else (measurements[0].timestamp if measurements else 0.0)
    new_state = ParticleSet(pos, weights, state.rng_seed, state.step + 1)
    return new_state, PositionEstimate(t, est, residual, 0, Method.PARTICLE_FILTER, flagged=flagged)


def group_epochs(measurements: Iterable[RangeMeasurement]) -> list[tuple[float, list[RangeMeasurement]]]:
    """Group consecutive measurements sharing a timestamp."""
    return [(t, list(g)) for t, g in itertools.groupby(measurements, key=lambda m: m.timestamp)]


def track(
    measurements: Iterable[RangeMeasurement],
    anchors: AnchorSet,
    method: Method | str = Method.GAUSS_NEWTON,
    *,
    dimension: int = 2,
    tag_height: float = TAG_HEIGHT,
    seed: int = 0,
    n_particles: int = 500,
    q: float = 0.5,
) -> list[PositionEstimate]:
    """Solve every ranging epoch with the chosen method."""
    method = Method(method)
    out: list[PositionEstimate] = []
    pf_state: ParticleSet | None = None
    t_prev = 0.0
    for t, group in group_epochs(measurements):
        idx = [anchors.index(m.anchor_id) for m in group]
        a = anchors.positions[idx]
        d = np.array([m.distance for m in group])
        sig = np.array([m.sigma for m in group])
        try:
            if method is Method.GAUSS_NEWTON:
                out.append(multilaterate(a, d, sigmas=sig, dimension=dimension, tag_height=tag_height, timestamp=t))
            elif method is Method.TDOA:
                dd = d[1:] - d[0]
                sig_dd = np.sqrt(sig[1:] ** 2 + sig[0] ** 2)
                out.append(tdoa_solve(a, dd, sigmas=sig_dd, dimension=dimension, tag_height=tag_height, timestamp=t))
            elif method is Method.PARTICLE_FILTER:
                if pf_state is None:
                    fix = multilaterate(a, d, sigmas=sig, dimension=dimension, tag_height=tag_height, timestamp=t)
                    pf_state = init_particles(fix.position, 0.3, n_particles, seed, dimension)
                    t_prev = t
                pf_state, est = particle_filter_step(
                    pf_state, group, anchors, t - t_prev, q=q, dimension=dimension, timestamp=t
                )
                t_prev = t
                out.append(est)
            else:
                raise ValueError(f"tracking does not support method {method.value}")
        except DegenerateGeometryError as exc:
            log.warning("epoch t=%.3f skipped: %s", t, exc)
    return out
