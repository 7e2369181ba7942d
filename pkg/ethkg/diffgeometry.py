"""
Differentiable Poincare ball operations on diffcore nodes.

Points are rows of an (n, d) node and each row carries its own curvature,
given as an (n, 1) node of positive values. ``pairwise_sq_distance`` scores
every query row against every candidate row without materializing an
(n, m, d) tensor, by expanding the Mobius sum in terms of inner products.
"""

from ethkg import diffcore as dc
from ethkg.diffcore import Node
from ethkg.geometry import BALL_EPS


MIN_DENOM = 1e-15
MIN_SQNORM = 1e-24


def exp_map_zero(v: Node, c: Node) -> Node:
    """Exponential map at the origin, projected into the ball."""
    arg = dc.sqrt(c) * dc.sqrt_norm(v)
    return dc.scale_rows(v, dc.tanh_ratio(arg))


def log_map_zero(u: Node, c: Node) -> Node:
    """Logarithmic map at the origin."""
    arg = dc.sqrt(c) * dc.sqrt_norm(u)
    return dc.scale_rows(u, dc.artanh_ratio(arg))


def project(x: Node, c: Node) -> Node:
    """Rescale rows with norm above (1 - BALL_EPS)/sqrt(c) onto that norm."""
    excess = dc.scale_by_constant(dc.sqrt(c) * dc.sqrt_norm(x), 1.0 / (1.0 - BALL_EPS))
    ones = x.tape.ones(*excess.shape)
    return dc.scale_rows(x, dc.divide(ones, dc.clamp_min(excess, 1.0)))


def mobius_add(x: Node, y: Node, c: Node) -> Node:
    """Row-wise Mobius addition x (+)_c y."""
    xy = dc.row_sum(x * y)
    x2 = dc.row_sum(dc.square(x))
    y2 = dc.row_sum(dc.square(y))
    cxy = c * xy
    coef_x = 1.0 + 2.0 * cxy + c * y2
    coef_y = 1.0 - c * x2
    num = dc.scale_rows(x, coef_x) + dc.scale_rows(y, coef_y)
    den = dc.clamp_min(1.0 + 2.0 * cxy + dc.square(c) * x2 * y2, MIN_DENOM)
    ones = x.tape.ones(*den.shape)
    return project(dc.scale_rows(num, dc.divide(ones, den)), c)


def distance(x: Node, y: Node, c: Node) -> Node:
    """Row-wise geodesic distance, shape (n, 1)."""
    diff_norm = dc.sqrt_norm(mobius_add(-x, y, c))
    return 2.0 * dc.artanh_ratio(dc.sqrt(c) * diff_norm) * diff_norm


def pairwise_sq_distance(x: Node, g: Node, c: Node) -> Node:
    """Squared distances between ball points and mapped tangent candidates.

    Args:
        x: (n, d) points, row i in the ball of curvature c[i]
        g: (m, d) tangent vectors; row j is mapped with exp_0^{c[i]} for query i
        c: (n, 1) curvatures

    Returns:
        (n, m) node with d^{c_i}(x_i, exp_0^{c_i}(g_j))^2
    """
    n, m = x.shape[0], g.shape[0]
    sqrt_c = dc.sqrt(c)
    g_norm = dc.sqrt_norm(g)
    # scale of exp_0^{c_i}(g_j) relative to g_j, projection included
    lam = dc.tanh_ratio(dc.matmul(sqrt_c, dc.transpose(g_norm)))

    g2 = dc.broadcast_row(dc.transpose(dc.row_sum(dc.square(g))), n)
    xy = lam * dc.matmul(x, dc.transpose(g))
    y2 = dc.square(lam) * g2
    x2 = dc.broadcast_col(dc.row_sum(dc.square(x)), m)
    cc = dc.broadcast_col(c, m)

    # (-x) (+)_c y = (A (-x) + B y) / D
    cxy = cc * xy
    coef_a = 1.0 - 2.0 * cxy + cc * y2
    coef_b = 1.0 - cc * x2
    num_sq = (
        dc.square(coef_a) * x2
        - 2.0 * (coef_a * coef_b * xy)
        + dc.square(coef_b) * y2
    )
    den = dc.clamp_min(1.0 - 2.0 * cxy + dc.square(cc) * x2 * y2, MIN_DENOM)
    diff_norm = dc.divide(dc.sqrt(dc.clamp_min(num_sq, MIN_SQNORM)), den)

    u = dc.broadcast_col(sqrt_c, m) * diff_norm
    dist = 2.0 * dc.artanh_ratio(u) * diff_norm
    return dc.square(dist)
