"""
Convex constraint sets and their projections.

TV is anisotropic: the l1 norm of forward differences with a Neumann boundary (the last row and
column have no forward neighbour). The TV ball is handled through the TV prox with a
bisection on the prox weight, not an exact projection.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, TypeAlias

import numpy as np
from numpy.typing import ArrayLike

from .errors import ConstraintParseError, DimensionMismatchError, ProjectionNotConvergedError
from .model import FloatArray, Image

logger = logging.getLogger(__name__)

DYKSTRA_TOL = 1e-4
DYKSTRA_MAX_ITER = 100_000
TV_BALL_TOL = 0.01
TV_BISECTION_STEPS = 60
PROX_TOL = 1e-12
PROX_MAX_ITER = 20_000


class Projectable(Protocol):
    def project(self, z: FloatArray) -> FloatArray: ...


def _square_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise DimensionMismatchError(f"image of length {n} is not square")
    return side


def _grad(img: FloatArray) -> tuple[FloatArray, FloatArray]:
    return np.diff(img, axis=1), np.diff(img, axis=0)


def _grad_adjoint(px: FloatArray, py: FloatArray) -> FloatArray:
    """D^T p for the forward-difference operator with Neumann boundary."""
    side = px.shape[0]
    out = np.zeros((side, side))
    out[:, :-1] -= px
    out[:, 1:] += px
    out[:-1, :] -= py
    out[1:, :] += py
    return out


def tv_norm(x: ArrayLike) -> float:
    arr = np.asarray(x, dtype=np.float64).ravel()
    side = _square_side(arr.size)
    gx, gy = _grad(arr.reshape(side, side))
    return float(np.abs(gx).sum() + np.abs(gy).sum())


def _dual_gap(x: FloatArray, px: FloatArray, py: FloatArray, weight: float) -> float:
    """P(x) - D(p) at x = z - weight D^T p; bounds 0.5 ||x - x_opt||^2."""
    gx, gy = _grad(x)
    return weight * float(np.abs(gx).sum() + np.abs(gy).sum() - (gx * px).sum() - (gy * py).sum())


def _prox_tv_dual(
    z: FloatArray,
    weight: float,
    *,
    tol: float,
    max_iter: int,
    warm: tuple[FloatArray, FloatArray] | None = None,
) -> tuple[FloatArray, tuple[FloatArray, FloatArray]]:
    """
    argmin_x 0.5 ||x - z||^2 + weight * TV(x) by FISTA on the dual box |p| <= 1.

    x = z - weight * D^T p; the dual step is 1 / (8 weight^2), since ||D||^2 <= 8. Stops once the
    duality gap is at most tol * max(1, ||z||^2), so ||x - x_opt|| <= sqrt(2 * gap).
    """
    side = z.shape[0]
    if warm is None:
        px = np.zeros((side, side - 1))
        py = np.zeros((side - 1, side))
    else:
        px, py = warm[0].copy(), warm[1].copy()
    qx, qy = px.copy(), py.copy()
    t = 1.0
    gap_limit = tol * max(1.0, float(np.dot(z.ravel(), z.ravel())))
    x = z - weight * _grad_adjoint(px, py)
    if _dual_gap(x, px, py, weight) <= gap_limit:
        return x, (px, py)
    for _ in range(max_iter):
        x_q = z - weight * _grad_adjoint(qx, qy)
        gx, gy = _grad(x_q)
        nx = np.clip(qx + gx / (8.0 * weight), -1.0, 1.0)
        ny = np.clip(qy + gy / (8.0 * weight), -1.0, 1.0)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        qx = nx + beta * (nx - px)
        qy = ny + beta * (ny - py)
        px, py, t = nx, ny, t_next
        x = z - weight * _grad_adjoint(px, py)
        if _dual_gap(x, px, py, weight) <= gap_limit:
            return x, (px, py)
    logger.debug("prox_tv hit the %d-iteration cap", max_iter)
    return x, (px, py)


def prox_tv(z: ArrayLike, lam: float, *, tol: float = PROX_TOL, max_iter: int = PROX_MAX_ITER) -> Image:
    """Minimiser of ||x - z||^2 + lam * TV(x)."""
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam!r}")
    arr = np.asarray(z, dtype=np.float64).ravel()
    if lam == 0.0:
        return arr.copy()
    side = _square_side(arr.size)
    x, _ = _prox_tv_dual(arr.reshape(side, side), 0.5 * lam, tol=tol, max_iter=max_iter)
    return x.ravel()


def project_tv_ball(z: ArrayLike, tau: float, *, tol: float = TV_BALL_TOL) -> Image:
    """
    Approximate projection onto {x : TV(x) <= tau}.

    Grows lambda from 1 by doubling until prox_tv(z, lambda) is inside the ball, then bisects
    until the TV of the prox is within ``tol`` of tau (at most 60 steps).
    """
    if tau < 0.0:
        raise ValueError(f"tau must be >= 0, got {tau!r}")
    arr = np.asarray(z, dtype=np.float64).ravel()
    side = _square_side(arr.size)
    if tv_norm(arr) <= tau:
        return arr.copy()
    if tau == 0.0:
        return np.full_like(arr, arr.mean())
    img = arr.reshape(side, side)

    def solve(
        lam: float, warm: tuple[FloatArray, FloatArray] | None
    ) -> tuple[FloatArray, tuple[FloatArray, FloatArray]]:
        x, dual = _prox_tv_dual(img, 0.5 * lam, tol=PROX_TOL, max_iter=PROX_MAX_ITER, warm=warm)
        return x.ravel(), dual

    lam_hi = 1.0
    x_hi, dual_hi = solve(lam_hi, None)
    doublings = 0
    while tv_norm(x_hi) > tau:
        if abs(tv_norm(x_hi) - tau) <= tol:
            return x_hi
        lam_hi *= 2.0
        doublings += 1
        if doublings > 200:
            return np.full_like(arr, arr.mean())
        x_hi, dual_hi = solve(lam_hi, dual_hi)
    if abs(tv_norm(x_hi) - tau) <= tol:
        return x_hi

    lam_lo = 0.0
    warm = dual_hi
    for _ in range(TV_BISECTION_STEPS):
        lam = 0.5 * (lam_lo + lam_hi)
        x, warm = solve(lam, warm)
        tv = tv_norm(x)
        if abs(tv - tau) <= tol:
            return x
        if tv > tau:
            lam_lo = lam
        else:
            lam_hi, x_hi = lam, x
    return x_hi


def project_nonneg(z: ArrayLike) -> Image:
    return np.maximum(np.asarray(z, dtype=np.float64), 0.0)


def project_l2_ball(z: ArrayLike, radius: float, center: ArrayLike) -> Image:
    if not radius > 0.0:
        raise ValueError(f"radius must be > 0, got {radius!r}")
    arr = np.asarray(z, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    diff = arr - c
    dist = float(np.linalg.norm(diff))
    if dist <= radius:
        return arr.copy()
    return c + diff * (radius / dist)


def dykstra_project(
    z: ArrayLike,
    set1: Projectable,
    set2: Projectable,
    tol: float = DYKSTRA_TOL,
    *,
    max_iter: int = DYKSTRA_MAX_ITER,
) -> Image:
    """Dykstra's alternating projections onto set1 and set2 with correction terms p and q."""
    if not tol > 0.0:
        raise ValueError(f"tol must be > 0, got {tol!r}")
    zk = np.asarray(z, dtype=np.float64).copy()
    p = np.zeros_like(zk)
    q = np.zeros_like(zk)
    residual = math.inf
    for _ in range(max_iter):
        y = set1.project(zk + p)
        p = zk + p - y
        z_next = set2.project(y + q)
        q = y + q - z_next
        residual = float(np.linalg.norm(z_next - zk))
        zk = z_next
        if residual <= tol:
            return zk
    raise ProjectionNotConvergedError(max_iter, residual)


@dataclass(frozen=True)
class NonNegOrthant:
    def project(self, z: FloatArray) -> FloatArray:
        return project_nonneg(z)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "nonneg"}


@dataclass(frozen=True)
class TVBall:
    tau: float
    grid_side: int

    def __post_init__(self) -> None:
        if self.tau < 0.0:
            raise ConstraintParseError(f"tv_ball tau must be >= 0, got {self.tau!r}")
        if self.grid_side < 1:
            raise ConstraintParseError(f"tv_ball grid_side must be >= 1, got {self.grid_side!r}")

    def project(self, z: FloatArray) -> FloatArray:
        if z.size != self.grid_side * self.grid_side:
            raise DimensionMismatchError(f"TV ball on a {self.grid_side}^2 grid cannot project length {z.size}")
        return project_tv_ball(z, self.tau)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "tv_ball", "tau": self.tau, "grid_side": self.grid_side}


@dataclass(frozen=True, eq=False)
class L2Ball:
    radius: float
    center: FloatArray

    def __post_init__(self) -> None:
        if not self.radius > 0.0:
            raise ConstraintParseError(f"l2_ball radius must be > 0, got {self.radius!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def project(self, z: FloatArray) -> FloatArray:
        return project_l2_ball(z, self.radius, self.center)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "l2_ball", "radius": self.radius, "center": self.center.tolist()}


@dataclass(frozen=True)
class Box:
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ConstraintParseError(f"box needs lower < upper, got [{self.lower!r}, {self.upper!r}]")

    def project(self, z: FloatArray) -> FloatArray:
        return np.clip(np.asarray(z, dtype=np.float64), self.lower, self.upper)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "box", "lower": self.lower, "upper": self.upper}


SimpleSet: TypeAlias = NonNegOrthant | TVBall | L2Ball | Box


@dataclass(frozen=True)
class _PairProjection:
    first: Projectable
    second: Projectable
    tol: float

    def project(self, z: FloatArray) -> FloatArray:
        return dykstra_project(z, self.first, self.second, self.tol)


@dataclass(frozen=True, eq=False)
class Intersection:
    """first ∩ second, optionally intersected again with an l2 ball through a second Dykstra pass."""

    first: SimpleSet
    second: SimpleSet
    ball: L2Ball | None = None
    tol: float = DYKSTRA_TOL
    _pair: _PairProjection = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for name in ("first", "second"):
            if isinstance(getattr(self, name), Intersection):
                raise ConstraintParseError(f"intersection.{name} cannot itself be an intersection")
        if not self.tol > 0.0:
            raise ConstraintParseError(f"intersection tol must be > 0, got {self.tol!r}")
        object.__setattr__(self, "_pair", _PairProjection(self.first, self.second, self.tol))

    def project(self, z: FloatArray) -> FloatArray:
        if self.ball is None:
            return self._pair.project(z)
        return dykstra_project(z, self._pair, self.ball, self.tol)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "type": "intersection",
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
            "tol": self.tol,
        }
        if self.ball is not None:
            out["ball"] = self.ball.to_dict()
        return out


ConstraintSet: TypeAlias = SimpleSet | Intersection


def _number(data: dict[str, Any], key: str, kind: str) -> float:
    if key not in data:
        raise ConstraintParseError(f"{kind}: missing {key!r}")
    try:
        return float(data[key])
    except (TypeError, ValueError) as exc:
        raise ConstraintParseError(f"{kind}.{key}: not numeric ({exc!s})")


def constraint_from_dict(
    data: dict[str, Any], *, d: int | None = None, x_star: FloatArray | None = None, nested: bool = False
) -> ConstraintSet:
    """
    Parse a constraint document. ``grid_side`` for a TV ball defaults to sqrt(d); an l2 ball
    centre may be a list or the string ``"x_star"`` (requires ``x_star``).
    """
    if not isinstance(data, dict):
        raise ConstraintParseError("constraint must be a JSON object")
    kind = str(data.get("type", "")).strip().lower()
    if kind == "nonneg":
        return NonNegOrthant()
    if kind == "box":
        return Box(_number(data, "lower", kind), _number(data, "upper", kind))
    if kind == "tv_ball":
        tau = _number(data, "tau", kind)
        if "grid_side" in data:
            side = int(data["grid_side"])
        elif d is not None:
            try:
                side = _square_side(d)
            except DimensionMismatchError as exc:
                raise ConstraintParseError(f"tv_ball: {exc!s}")
        else:
            raise ConstraintParseError("tv_ball: missing 'grid_side' and no image size to infer it from")
        if d is not None and side * side != d:
            raise ConstraintParseError(f"tv_ball: grid_side {side} does not match image size {d}")
        return TVBall(tau, side)
    if kind == "l2_ball":
        radius = _number(data, "radius", kind)
        raw_center = data.get("center", "zero")
        if raw_center == "x_star":
            if x_star is None:
                raise ConstraintParseError("l2_ball: center 'x_star' needs a reference image")
            center = np.asarray(x_star, dtype=np.float64)
        elif raw_center == "zero":
            if d is None:
                raise ConstraintParseError("l2_ball: center 'zero' needs the image size")
            center = np.zeros(d)
        else:
            try:
                center = np.asarray(raw_center, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ConstraintParseError(f"l2_ball.center: not numeric ({exc!s})")
            if d is not None and center.size != d:
                raise ConstraintParseError(f"l2_ball.center has {center.size} entries, image has {d}")
        return L2Ball(radius, center)
    if kind == "intersection":
        if nested:
            raise ConstraintParseError("intersections cannot be nested")
        first = constraint_from_dict(data.get("first", {}), d=d, x_star=x_star, nested=True)
        second = constraint_from_dict(data.get("second", {}), d=d, x_star=x_star, nested=True)
        ball = None
        if "ball" in data:
            parsed = constraint_from_dict(data["ball"], d=d, x_star=x_star, nested=True)
            if not isinstance(parsed, L2Ball):
                raise ConstraintParseError("intersection.ball must be an l2_ball")
            ball = parsed
        tol = float(data.get("tol", DYKSTRA_TOL))
        assert not isinstance(first, Intersection) and not isinstance(second, Intersection)
        return Intersection(first, second, ball, tol)
    raise ConstraintParseError(f"unknown constraint type {data.get('type')!r}")


def load_constraint(path: str | Path, *, d: int | None = None, x_star: FloatArray | None = None) -> ConstraintSet:
    path_obj = Path(path)
    try:
        data = json.loads(path_obj.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConstraintParseError(f"Could not read constraint file {path_obj.name!r}: {exc!s}")
    except json.JSONDecodeError as exc:
        raise ConstraintParseError(f"Invalid JSON in constraint file {path_obj.name!r}. {exc!s}")
    return constraint_from_dict(data, d=d, x_star=x_star)
