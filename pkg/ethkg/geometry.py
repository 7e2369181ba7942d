"""
Poincare ball operations with curvature as an explicit argument.

The ``*_array`` kernels work on arrays of shape (..., d) with a scalar or
broadcastable curvature; the typed functions wrap them with validation.
"""

from dataclasses import dataclass
import math
from typing import Union

import numpy as np

from ethkg.errors import InvalidArgumentError


BALL_EPS = 1e-5
ATANH_EPS = 1e-10
SMALL_NORM_EPS = 1e-12

CurvatureLike = Union["Curvature", float, np.ndarray]


@dataclass(frozen=True)
class Curvature:
    """Magnitude c of the negative curvature -c"""

    c: float

    def __post_init__(self):
        if not math.isfinite(self.c) or self.c <= 0:
            raise InvalidArgumentError(
                f"curvature must be finite and > 0, got {self.c}"
            )

    @property
    def sqrt(self) -> float:
        return math.sqrt(self.c)

    @property
    def max_norm(self) -> float:
        """Largest norm a projected point may have"""
        return (1.0 - BALL_EPS) / self.sqrt


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Vector in the tangent space at the origin"""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 1:
            raise InvalidArgumentError("tangent vector must be one-dimensional")
        if not np.all(np.isfinite(coords)):
            raise InvalidArgumentError("tangent vector has non-finite components")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])


@dataclass(frozen=True, eq=False)
class PoincarePoint:
    """Point strictly inside the ball of radius 1/sqrt(c)"""

    coords: np.ndarray
    curvature: Curvature

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 1:
            raise InvalidArgumentError("point must be one-dimensional")
        if not np.all(np.isfinite(coords)):
            raise InvalidArgumentError("point has non-finite coordinates")
        if float(coords @ coords) >= 1.0 / self.curvature.c:
            raise InvalidArgumentError("point lies outside the Poincare ball")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])

    @property
    def sqnorm(self) -> float:
        return float(self.coords @ self.coords)


def _as_c(c: CurvatureLike) -> np.ndarray:
    if isinstance(c, Curvature):
        return np.asarray(c.c, dtype=np.float64)
    return np.asarray(c, dtype=np.float64)


def _norm(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1, keepdims=True)


def project_array(x: np.ndarray, c: CurvatureLike) -> np.ndarray:
    """Rescale rows whose norm reaches (1 - BALL_EPS)/sqrt(c) onto that norm."""
    c = _as_c(c)
    norm = _norm(x)
    max_norm = (1.0 - BALL_EPS) / np.sqrt(c)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm >= max_norm, x / safe * max_norm, x)


def exp_map_zero_array(v: np.ndarray, c: CurvatureLike) -> np.ndarray:
    """tanh(sqrt(c)|v|) v / (sqrt(c)|v|), projected into the ball."""
    c = _as_c(c)
    norm = _norm(v)
    arg = np.sqrt(c) * norm
    small = norm < SMALL_NORM_EPS
    factor = np.tanh(arg) / np.where(small, 1.0, arg)
    return project_array(np.where(small, v, v * factor), c)


def log_map_zero_array(u: np.ndarray, c: CurvatureLike) -> np.ndarray:
    """arctanh(sqrt(c)|u|) u / (sqrt(c)|u|); zero stays zero."""
    c = _as_c(c)
    norm = _norm(u)
    arg = np.sqrt(c) * norm
    small = norm < SMALL_NORM_EPS
    clamped = np.minimum(arg, 1.0 - ATANH_EPS)
    factor = np.arctanh(clamped) / np.where(small, 1.0, arg)
    return np.where(small, u, u * factor)


def mobius_add_array(x: np.ndarray, y: np.ndarray, c: CurvatureLike) -> np.ndarray:
    """Mobius addition x (+)_c y, projected into the ball."""
    c = _as_c(c)
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = np.sum(x * x, axis=-1, keepdims=True)
    y2 = np.sum(y * y, axis=-1, keepdims=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c**2 * x2 * y2
    return project_array(num / np.maximum(den, 1e-15), c)


def poincare_distance_array(
    x: np.ndarray, y: np.ndarray, c: CurvatureLike
) -> np.ndarray:
    """Geodesic distance (2/sqrt(c)) arctanh(sqrt(c) |(-x) (+)_c y|)."""
    c = _as_c(c)
    sqrt_c = np.sqrt(c)
    diff_norm = _norm(mobius_add_array(-x, y, c))
    arg = np.minimum(sqrt_c * diff_norm, 1.0 - ATANH_EPS)
    return (2.0 / sqrt_c * np.arctanh(arg))[..., 0]


def _check_same_ball(x: PoincarePoint, y: PoincarePoint, c: Curvature) -> None:
    if x.dim != y.dim:
        raise InvalidArgumentError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if x.curvature != c or y.curvature != c:
        raise InvalidArgumentError("points do not share the requested curvature")


def project_to_ball(coords: np.ndarray, c: Curvature) -> PoincarePoint:
    """Pull coordinates back inside the ball if they reach its boundary layer."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise InvalidArgumentError("coordinates must be finite")
    return PoincarePoint(project_array(coords, c), c)


def exp_map_zero(v: TangentVector, c: Curvature) -> PoincarePoint:
    """Map a tangent vector at the origin onto the ball."""
    return PoincarePoint(exp_map_zero_array(v.coords, c), c)


def log_map_zero(u: PoincarePoint, c: Curvature) -> TangentVector:
    """Map a ball point back to the tangent space at the origin."""
    if u.curvature != c:
        raise InvalidArgumentError("point does not live in the requested ball")
    if math.sqrt(u.sqnorm) * c.sqrt > 1.0 - BALL_EPS * 0.5:
        raise InvalidArgumentError("point lies outside the projection tolerance")
    return TangentVector(log_map_zero_array(u.coords, c))


def mobius_add(x: PoincarePoint, y: PoincarePoint, c: Curvature) -> PoincarePoint:
    """Hyperbolic analogue of vector addition."""
    _check_same_ball(x, y, c)
    return PoincarePoint(mobius_add_array(x.coords, y.coords, c), c)


def poincare_distance(x: PoincarePoint, y: PoincarePoint, c: Curvature) -> float:
    """Geodesic distance between two points of the same ball."""
    _check_same_ball(x, y, c)
    return float(poincare_distance_array(x.coords, y.coords, c))
