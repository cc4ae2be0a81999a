"""Charts, connections, sections, and curvature.

A :class:`Chart` is a rectangular product grid on an open box in R^m.
A :class:`Connection` stores the connection coefficients omega[i][j][mu]
(the e_i component of the covariant derivative of e_j along coordinate mu)
as :class:`~flatbundle.exprfield.ScalarField` entries, so curvature and
covariant derivatives of closed-form sections are computed by exact
symbolic differentiation.  Grid-sampled data falls back to centered
finite-difference stencils whose order adapts to the axis resolution.

Index conventions, used consistently everywhere:

* ``omega[i][j][mu]``: matrix row ``i``, column ``j``, direction ``mu``;
* Christoffel input ``Gamma[i][mu][j]`` maps to ``omega[i][j][mu]``;
* ``(cov s)^i_mu = d_mu s^i + sum_j omega[i][j][mu] s^j``;
* curvature ``(R_{mu nu})^i_j = d_mu omega[i][j][nu] - d_nu omega[i][j][mu]
  + sum_k (omega[i][k][mu] omega[k][j][nu] - omega[i][k][nu] omega[k][j][mu])``
  for ``mu < nu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exprfield import ScalarField

__all__ = [
    "Chart",
    "Connection",
    "SectionField",
    "CurvatureSlice",
    "connection_from_christoffel",
    "curvature_operators",
    "covariant_derivative",
    "covariant_derivative_grid",
    "induce_sym2",
    "frame_change",
    "sym2_basis",
    "fd_weights",
    "diff_matrix",
    "grid_derivative",
]


# ---------------------------------------------------------------------------
# finite differences

def fd_weights(nodes, x0, order=1):
    """Weights for the ``order``-th derivative at ``x0`` from samples at ``nodes``.

    Classic recursive construction; exact for polynomials up to degree
    ``len(nodes) - 1``.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def _axis_order(n):
    # highest even order supported by an n-point axis, capped at 6
    if n >= 7:
        return 6
    if n >= 5:
        return 4
    if n >= 3:
        return 2
    raise ValueError(f"axis needs at least 3 points, got {n}")


@lru_cache(maxsize=None)
def _diff_matrix_cached(n, h, order):
    width = order + 1
    d = np.zeros((n, n))
    xs = np.arange(n, dtype=float) * h
    for i in range(n):
        lo = min(max(i - order // 2, 0), n - width)
        idx = np.arange(lo, lo + width)
        d[i, idx] = fd_weights(xs[idx], xs[i], 1)
    return d


def diff_matrix(n, h, order=None):
    """Dense n-by-n first-derivative matrix on a uniform grid of spacing ``h``.

    Centered stencils of the given accuracy order in the interior, offset
    stencils of the same order near the edges.  ``order`` defaults to the
    largest of 6, 4, 2 that the axis supports.
    """
    if order is None:
        order = _axis_order(n)
    if order % 2 or order < 2:
        raise ValueError("order must be a positive even integer")
    if n < order + 1:
        raise ValueError(f"{n}-point axis cannot support order {order}")
    return _diff_matrix_cached(int(n), float(h), int(order))


def grid_derivative(values, chart, axis, order=None, mask=None):
    """Differentiate grid samples along one chart axis.

    ``values`` has the chart's grid shape in its leading axes; trailing axes
    (fiber indices) ride along unchanged.  With ``mask`` given, nodes
    outside it are treated as holes: results whose stencil window touches
    a hole come back NaN, and every other node is differentiated as if the
    holes were not on the line.  (Without a mask, a single NaN would
    poison its whole grid line through the zero weights of the dense
    stencil matrix.)
    """
    n = chart.shape[axis]
    d = diff_matrix(n, chart.spacings[axis], order)
    if mask is None:
        moved = np.moveaxis(values, axis, 0)
        flat = moved.reshape(n, -1)
        out = (d @ flat).reshape(moved.shape)
        return np.moveaxis(out, 0, axis)

    grid_ndim = len(chart.shape)
    trail = values.ndim - grid_ndim
    hole = ~np.asarray(mask, dtype=bool)
    ext = hole.reshape(hole.shape + (1,) * trail)
    out = grid_derivative(np.where(ext, 0.0, values), chart, axis, order)
    window = np.abs(d) > 0
    moved = np.moveaxis(hole, axis, 0)
    touched = (window @ moved.reshape(n, -1).astype(float)) > 0.0
    touched = np.moveaxis(touched.reshape(moved.shape), 0, axis)
    bad = (touched | hole).reshape(hole.shape + (1,) * trail)
    return np.where(bad, np.nan, out)


# ---------------------------------------------------------------------------
# chart

@dataclass(frozen=True)
class Chart:
    """Product grid on an open box: coordinate names, bounds, resolution."""

    coords: tuple
    lows: tuple
    highs: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "lows", tuple(float(a) for a in self.lows))
        object.__setattr__(self, "highs", tuple(float(b) for b in self.highs))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        m = len(self.coords)
        if not (len(self.lows) == len(self.highs) == len(self.shape) == m):
            raise ValueError("coords, bounds, and shape must have equal length")
        if m == 0:
            raise ValueError("chart needs at least one coordinate")
        for a, b, n in zip(self.lows, self.highs, self.shape):
            if not a < b:
                raise ValueError(f"empty coordinate interval [{a}, {b}]")
            if n < 3:
                raise ValueError("each axis needs at least 3 grid points")

    @property
    def ndim(self):
        return len(self.coords)

    @property
    def spacings(self):
        return tuple((b - a) / (n - 1)
                     for a, b, n in zip(self.lows, self.highs, self.shape))

    def axes(self):
        return [np.linspace(a, b, n)
                for a, b, n in zip(self.lows, self.highs, self.shape)]

    def mesh(self):
        """Coordinate arrays of full grid shape, one per coordinate."""
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self):
        """Array of shape ``(*shape, m)`` with the coordinates of every node."""
        return np.stack(self.mesh(), axis=-1)

    def contains(self, point):
        return all(a - 1e-12 <= x <= b + 1e-12
                   for x, a, b in zip(point, self.lows, self.highs))

    def index_of(self, point):
        """Grid index of the node nearest to ``point`` (must lie in the box)."""
        if len(point) != self.ndim:
            raise ValueError("point arity does not match chart")
        if not self.contains(point):
            raise ValueError(f"point {tuple(point)} lies outside the chart box")
        idx = []
        for x, a, h, n in zip(point, self.lows, self.spacings, self.shape):
            i = int(round((x - a) / h))
            idx.append(min(max(i, 0), n - 1))
        return tuple(idx)

    def point_of(self, idx):
        if len(idx) != self.ndim:
            raise ValueError("index arity does not match chart")
        for i, n in zip(idx, self.shape):
            if not 0 <= i < n:
                raise IndexError(f"grid index {tuple(idx)} outside shape {self.shape}")
        return tuple(a + i * h for a, h, i in zip(self.lows, self.spacings, idx))

    def center_index(self):
        return tuple(n // 2 for n in self.shape)

    def field(self, src):
        """Parse an expression string into a field on this chart."""
        from .exprfield import parse_scalar_field
        return parse_scalar_field(src, self.coords)

    def zero(self):
        return ScalarField.constant(0.0, self.coords)


def _as_field(value, coords):
    if isinstance(value, ScalarField):
        if value.coords != tuple(coords):
            raise ValueError("field coordinates do not match chart")
        return value
    if isinstance(value, str):
        from .exprfield import parse_scalar_field
        return parse_scalar_field(value, coords)
    return ScalarField.constant(value, coords)


def _field_matrix_grid(fields, mesh):
    """Evaluate a nested structure of fields on the mesh, stacking fiber axes last."""
    fields = np.asarray(fields, dtype=object)
    grid_shape = np.broadcast(*mesh).shape
    out = np.empty(grid_shape + fields.shape)
    for index in np.ndindex(*fields.shape):
        f = fields[index]
        out[(Ellipsis,) + index] = f.on_grid(mesh)
    return out


# ---------------------------------------------------------------------------
# connection

@dataclass(eq=False)
class Connection:
    """Connection coefficients on a trivialized rank-``rank`` bundle."""

    chart: Chart
    rank: int
    omega: np.ndarray  # (rank, rank, m) object array of ScalarField
    _curvature: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n, m = self.rank, self.chart.ndim
        arr = np.empty((n, n, m), dtype=object)
        src = np.asarray(self.omega, dtype=object)
        if src.shape != (n, n, m):
            raise ValueError(f"omega must have shape {(n, n, m)}, got {src.shape}")
        for i in range(n):
            for j in range(n):
                for mu in range(m):
                    arr[i, j, mu] = _as_field(src[i, j, mu], self.chart.coords)
        self.omega = arr
        self._curvature = None

    # -- pointwise / grid evaluation

    def omega_at(self, point):
        """Connection matrices at a point: array of shape ``(m, rank, rank)``."""
        n, m = self.rank, self.chart.ndim
        out = np.zeros((m, n, n))
        for i in range(n):
            for j in range(n):
                for mu in range(m):
                    out[mu, i, j] = self.omega[i, j, mu](*point)
        return out

    def omega_grid(self):
        """Samples on the chart grid, shape ``(*shape, m, rank, rank)``."""
        mesh = self.chart.mesh()
        vals = _field_matrix_grid(self.omega, mesh)  # (*shape, n, n, m)
        return np.moveaxis(vals, -1, -3)

    # -- curvature

    def curvature_field(self, mu, nu):
        """Symbolic curvature matrix for the coordinate pair ``mu < nu``."""
        if not 0 <= mu < nu < self.chart.ndim:
            raise ValueError("curvature slices are indexed by pairs mu < nu")
        if self._curvature is None:
            self._curvature = {}
        key = (mu, nu)
        if key not in self._curvature:
            n = self.rank
            mat = np.empty((n, n), dtype=object)
            for i in range(n):
                for j in range(n):
                    expr = self.omega[i, j, nu].diff(mu) - self.omega[i, j, mu].diff(nu)
                    for k in range(n):
                        expr = expr + (self.omega[i, k, mu] * self.omega[k, j, nu]
                                       - self.omega[i, k, nu] * self.omega[k, j, mu])
                    mat[i, j] = expr
            self._curvature[key] = mat
        return self._curvature[key]

    def curvature_pairs(self):
        m = self.chart.ndim
        return [(mu, nu) for mu in range(m) for nu in range(mu + 1, m)]

    def curvature_grid(self):
        """Curvature samples, shape ``(*shape, P, rank, rank)`` over mu<nu pairs.

        For one-dimensional charts there are no coordinate pairs; a single
        zero slice is returned so downstream rank logic sees an
        unconstrained fiber.
        """
        pairs = self.curvature_pairs()
        mesh = self.chart.mesh()
        n = self.rank
        if not pairs:
            return np.zeros(self.chart.shape + (1, n, n))
        slabs = []
        for mu, nu in pairs:
            slabs.append(_field_matrix_grid(self.curvature_field(mu, nu), mesh))
        return np.stack(slabs, axis=-3)


@dataclass(frozen=True)
class CurvatureSlice:
    """Curvature operator of one coordinate pair, evaluated at a point."""

    mu: int
    nu: int
    matrix: np.ndarray


def connection_from_christoffel(gamma, chart):
    """Connection on the tangent bundle from Christoffel symbols.

    ``gamma[i][mu][j]`` is the coefficient of ``e_i`` in the covariant
    derivative of ``e_j`` along coordinate ``mu``; entries may be
    expression strings, numbers, or fields.  The stored coefficients are
    ``omega[i][j][mu] = gamma[i][mu][j]``.
    """
    m = chart.ndim
    src = np.asarray(gamma, dtype=object)
    if src.shape != (m, m, m):
        raise ValueError(f"gamma must have shape {(m, m, m)}, got {src.shape}")
    omega = np.empty((m, m, m), dtype=object)
    for i in range(m):
        for mu in range(m):
            for j in range(m):
                omega[i, j, mu] = _as_field(src[i, mu, j], chart.coords)
    return Connection(chart, m, omega)


def curvature_operators(conn, point):
    """All curvature operators at ``point`` as :class:`CurvatureSlice` list (mu < nu)."""
    out = []
    for mu, nu in conn.curvature_pairs():
        fields = conn.curvature_field(mu, nu)
        n = conn.rank
        mat = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                mat[i, j] = fields[i, j](*point)
        out.append(CurvatureSlice(mu, nu, mat))
    return out


# ---------------------------------------------------------------------------
# sections

class SectionField:
    """Section of the bundle: closed-form components or grid samples.

    Expression-backed sections differentiate exactly; grid-backed sections
    use the chart's finite-difference stencils.
    """

    def __init__(self, chart, components=None, values=None):
        self.chart = chart
        if (components is None) == (values is None):
            raise ValueError("provide exactly one of components or values")
        if components is not None:
            self.components = tuple(_as_field(c, chart.coords) for c in components)
            self.values = None
            self.rank = len(self.components)
        else:
            values = np.asarray(values, dtype=float)
            if values.shape[:-1] != chart.shape:
                raise ValueError(
                    f"values must have grid shape {chart.shape} plus a fiber axis")
            self.components = None
            self.values = values
            self.rank = values.shape[-1]

    @property
    def is_expression(self):
        return self.components is not None

    @classmethod
    def constant(cls, chart, vector):
        return cls(chart, components=[float(v) for v in vector])

    def at(self, point):
        if self.is_expression:
            return np.array([c(*point) for c in self.components])
        return self.values[self.chart.index_of(point)]

    def at_index(self, idx):
        if self.is_expression:
            return self.at(self.chart.point_of(idx))
        return self.values[tuple(idx)]

    def sample(self):
        """Grid samples, shape ``(*shape, rank)``."""
        if self.is_expression:
            mesh = self.chart.mesh()
            return np.stack([c.on_grid(mesh) for c in self.components], axis=-1)
        return self.values


def covariant_derivative(conn, section, point):
    """Covariant derivative at a point: matrix of shape ``(rank, m)``.

    Row ``i``, column ``mu`` holds ``(cov_mu s)^i``.  Expression-backed
    sections are differentiated exactly; grid-backed ones require ``point``
    to lie on the chart grid (nearest-node lookup) and use stencils.
    """
    n, m = conn.rank, conn.chart.ndim
    if section.rank != n:
        raise ValueError("section rank does not match connection")
    if section.is_expression:
        out = np.zeros((n, m))
        s_val = section.at(point)
        for mu in range(m):
            for i in range(n):
                d = section.components[i].diff(mu)(*point)
                acc = d
                for j in range(n):
                    acc += conn.omega[i, j, mu](*point) * s_val[j]
                out[i, mu] = acc
        return out
    grid = covariant_derivative_grid(conn, section)
    return grid[conn.chart.index_of(point)]


def covariant_derivative_grid(conn, section):
    """Covariant derivative on the whole grid, shape ``(*shape, rank, m)``."""
    m = conn.chart.ndim
    vals = section.sample()
    omega = conn.omega_grid()  # (*shape, m, n, n)
    mesh = conn.chart.mesh() if section.is_expression else None
    finite = np.isfinite(vals).all(axis=-1)
    mask = None if finite.all() else finite
    cols = []
    for mu in range(m):
        if section.is_expression:
            d = np.stack([c.diff(mu).on_grid(mesh)
                          for c in section.components], axis=-1)
        else:
            d = grid_derivative(vals, conn.chart, mu, mask=mask)
        cols.append(d + np.einsum("...ij,...j->...i", omega[..., mu, :, :], vals))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# induced connection on symmetric 2-tensors

def sym2_basis(m):
    """Basis of symmetric 2-tensors on an m-dimensional chart.

    Returns ``(matrices, labels)``: first the squares ``dx^i (x) dx^i`` in
    coordinate order, then the symmetrized pairs ``dx^i (x) dx^j + dx^j (x)
    dx^i`` for ``i < j`` in lexicographic order.
    """
    mats, labels = [], []
    for i in range(m):
        b = np.zeros((m, m))
        b[i, i] = 1.0
        mats.append(b)
        labels.append((i, i))
    for i in range(m):
        for j in range(i + 1, m):
            b = np.zeros((m, m))
            b[i, j] = 1.0
            b[j, i] = 1.0
            mats.append(b)
            labels.append((i, j))
    return mats, labels


def induce_sym2(conn):
    """Connection induced on symmetric 2-tensors (covariant, rank m(m+1)/2).

    For a basis tensor with coefficient matrix ``B``, the derivative along
    ``mu`` has coefficient matrix ``-Gamma_mu^T B - B Gamma_mu`` with
    ``(Gamma_mu)_{kj} = omega[k][j][mu]``; the result is re-expanded in the
    :func:`sym2_basis` order.
    """
    m = conn.chart.ndim
    if conn.rank != m:
        raise ValueError("induced tensor connection needs a tangent-bundle connection")
    mats, labels = sym2_basis(m)
    nn = len(mats)
    zero = conn.chart.zero()
    omega = np.full((nn, nn, m), zero, dtype=object)
    for b, bmat in enumerate(mats):
        for mu in range(m):
            # c[i][j] = -sum_k (omega[k][i][mu] B[k][j] + B[i][k] omega[k][j][mu])
            for a, (i, j) in enumerate(labels):
                expr = zero
                for k in range(m):
                    if bmat[k, j] != 0.0:
                        expr = expr - conn.omega[k, i, mu] * float(bmat[k, j])
                    if bmat[i, k] != 0.0:
                        expr = expr - conn.omega[k, j, mu] * float(bmat[i, k])
                omega[a, b, mu] = omega[a, b, mu] + expr
    return Connection(conn.chart, nn, omega)


# ---------------------------------------------------------------------------
# gauge transformations

def frame_change(conn, g, g_inv=None):
    """Rewrite the connection in the frame ``e'_j = sum_i g[i][j] e_i``.

    ``g`` is a square array of fields/strings/numbers; ``g_inv``, when
    given, must be its exact inverse (supplying it avoids symbolic matrix
    inversion).  The transformed coefficients are
    ``omega' = g^{-1} (omega g + dg)`` per coordinate.
    """
    n, m = conn.rank, conn.chart.ndim
    coords = conn.chart.coords
    gf = np.empty((n, n), dtype=object)
    src = np.asarray(g, dtype=object)
    if src.shape != (n, n):
        raise ValueError(f"g must be {n}x{n}")
    for i in range(n):
        for j in range(n):
            gf[i, j] = _as_field(src[i, j], coords)
    if g_inv is None:
        ginv = _symbolic_inverse(gf, coords)
    else:
        ginv = np.empty((n, n), dtype=object)
        src = np.asarray(g_inv, dtype=object)
        if src.shape != (n, n):
            raise ValueError(f"g_inv must be {n}x{n}")
        for i in range(n):
            for j in range(n):
                ginv[i, j] = _as_field(src[i, j], coords)
    zero = ScalarField.constant(0.0, coords)
    omega = np.full((n, n, m), zero, dtype=object)
    for mu in range(m):
        inner = np.full((n, n), zero, dtype=object)  # omega_mu g + d_mu g
        for i in range(n):
            for j in range(n):
                expr = gf[i, j].diff(mu)
                for k in range(n):
                    expr = expr + conn.omega[i, k, mu] * gf[k, j]
                inner[i, j] = expr
        for i in range(n):
            for j in range(n):
                expr = zero
                for k in range(n):
                    expr = expr + ginv[i, k] * inner[k, j]
                omega[i, j, mu] = expr
    return Connection(conn.chart, n, omega)


def _symbolic_inverse(gf, coords):
    n = gf.shape[0]
    if n == 1:
        inv = np.empty((1, 1), dtype=object)
        inv[0, 0] = ScalarField.constant(1.0, coords) / gf[0, 0]
        return inv
    det = _symbolic_det(gf, coords)
    inv = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(gf, j, axis=0), i, axis=1)
            cof = _symbolic_det(minor, coords)
            if (i + j) % 2:
                cof = -cof
            inv[i, j] = cof / det
    return inv


def _symbolic_det(gf, coords):
    n = gf.shape[0]
    if n == 1:
        return gf[0, 0]
    acc = ScalarField.constant(0.0, coords)
    for j in range(n):
        minor = np.delete(np.delete(gf, 0, axis=0), j, axis=1)
        term = gf[0, j] * _symbolic_det(minor, coords)
        acc = acc + term if j % 2 == 0 else acc - term
    return acc
