"""Parallel frames and sections on a flat subbundle.

Once the derived flag stabilizes, the connection form written in a frame
adapted to the final subbundle is block triangular, and its upper-left
block ``phi`` satisfies the flatness identity ``d phi + phi ^ phi = 0``.
Solving ``dA = -phi A`` with ``A = I`` at the base node then turns the
frame columns into genuinely parallel sections.  The solver here marches
the matrix ODE with classical Runge-Kutta along axis-ordered polylines
through the grid, interpolating ``phi`` between nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import Chart, Connection, SectionField, grid_derivative, _axis_order
from .flag import FlagError, FrameField, SubbundleField, gauge_align

__all__ = [
    "AdaptedFrame",
    "ParallelFrameField",
    "IntegrationError",
    "MembershipError",
    "adapted_frame",
    "flatness_residual",
    "flatness_residual_grid",
    "integrate_parallel_frame",
    "make_parallel_section",
    "parallel_transport",
    "parallelism_residual",
    "default_block_tol",
]


class IntegrationError(RuntimeError):
    """The parallel-frame ODE produced a numerically singular solution."""


class MembershipError(ValueError):
    """A requested start vector does not lie in the subbundle fiber."""


def default_block_tol(chart):
    """Tolerance on the adapted frame's lower-left block.

    For a genuinely parallel subbundle the block vanishes identically;
    what remains numerically is finite-difference noise from the frame
    derivatives, for which 100 h_max^4 is a comfortable ceiling at the
    stencil orders in use.  Never below 1e-8.
    """
    return max(1e-8, 100.0 * max(chart.spacings) ** 4)


@dataclass
class AdaptedFrame:
    """Orthonormal frame with the subbundle spanned by the first ``rank`` columns.

    ``frame`` holds the full change-of-basis matrices ``G``; ``phi`` the
    upper-left block of the rewritten connection form, indexed
    ``(*grid, direction, row, column)``.  ``block_max`` records the
    largest lower-left entry actually observed.
    """

    chart: Chart
    rank: int
    frame: np.ndarray       # (*shape, N, N)
    phi: np.ndarray         # (*shape, m, rank, rank)
    omega_prime: np.ndarray  # (*shape, m, N, N)
    mask: np.ndarray
    origin: tuple
    block_max: float


def adapted_frame(conn, field, origin=None, block_tol=None, check_blocks=True):
    """Gauge the bundle so the subbundle sits in the leading frame columns.

    The subbundle frame and a frame of its orthogonal complement are both
    aligned outward from ``origin``; the connection form is rewritten in
    the combined frame.  Because the combined frame is orthonormal, the
    derivative part of the rewritten form is exactly antisymmetric, so the
    symmetric part of the finite-difference estimate is pure noise and is
    discarded.

    Raises :class:`FlagError` when the lower-left block (which vanishes
    for a parallel subbundle) exceeds ``block_tol``; pass
    ``check_blocks=False`` to measure deliberately non-parallel frames.
    """
    chart = conn.chart
    if origin is None:
        origin = chart.center_index()
    origin = tuple(int(i) for i in origin)
    n_fiber = conn.rank
    aligned = gauge_align(field, origin)
    k = aligned.rank
    if k == 0:
        raise ValueError("subbundle has rank zero; nothing to frame")
    if block_tol is None:
        block_tol = default_block_tol(chart)

    shape = chart.shape
    comp_dim = n_fiber - k
    comp_bases = np.empty(shape, dtype=object)
    ranks = np.full(shape, -1, dtype=int)
    f_flat = aligned.values.reshape(-1, n_fiber, k)
    comp_flat = comp_bases.reshape(-1)
    mask_flat = aligned.mask.reshape(-1)
    valid_idx = np.nonzero(mask_flat)[0]
    if valid_idx.size:
        u, _, _ = np.linalg.svd(f_flat[valid_idx], full_matrices=True)
        for p, up in zip(valid_idx, u):
            comp_flat[p] = up[:, k:]
    ranks.reshape(-1)[valid_idx] = comp_dim
    comp_field = SubbundleField(chart, n_fiber, comp_bases, ranks,
                                aligned.mask.copy())
    comp_aligned = gauge_align(comp_field, origin)

    mask = aligned.mask & comp_aligned.mask
    g = np.concatenate([aligned.values, comp_aligned.values], axis=-1)
    g = np.where(mask[..., None, None], g, np.nan)

    m = chart.ndim
    dg = np.stack([grid_derivative(g, chart, mu, mask=mask) for mu in range(m)],
                  axis=-3)
    s = np.einsum("...ij,...mik->...mjk", g, dg)
    skew = 0.5 * (s - np.swapaxes(s, -1, -2))
    omega = conn.omega_grid()
    rotated = np.einsum("...ij,...mik,...kl->...mjl", g, omega, g)
    omega_prime = rotated + skew

    valid = mask & np.isfinite(omega_prime).all(axis=(-3, -2, -1))
    omega_prime = np.where(valid[..., None, None, None], omega_prime, np.nan)

    lower_left = omega_prime[..., k:, :k]
    if lower_left.size and valid.any():
        block_max = float(np.nanmax(np.abs(lower_left[valid])))
    else:
        block_max = 0.0
    if check_blocks and block_max > block_tol:
        raise FlagError(
            f"subbundle is not parallel: lower-left block reaches {block_max:.3e} "
            f"(tolerance {block_tol:.3e})")

    phi = omega_prime[..., :k, :k]
    return AdaptedFrame(chart, k, g, phi, omega_prime, valid, origin, block_max)


# ---------------------------------------------------------------------------
# flatness residual

def flatness_residual_grid(adapted):
    """Max-entry samples of ``d phi + phi ^ phi`` over the grid."""
    chart = adapted.chart
    m = chart.ndim
    phi = adapted.phi
    out = np.zeros(chart.shape)
    for mu in range(m):
        for nu in range(mu + 1, m):
            dmu = grid_derivative(phi[..., nu, :, :], chart, mu, mask=adapted.mask)
            dnu = grid_derivative(phi[..., mu, :, :], chart, nu, mask=adapted.mask)
            comm = (np.einsum("...ik,...kj->...ij", phi[..., mu, :, :],
                              phi[..., nu, :, :])
                    - np.einsum("...ik,...kj->...ij", phi[..., nu, :, :],
                                phi[..., mu, :, :]))
            r = np.abs(dmu - dnu + comm).max(axis=(-2, -1))
            out = np.maximum(out, r)
    return out


def flatness_residual(adapted, p):
    """Flatness defect of the adapted block at the grid node nearest ``p``."""
    idx = adapted.chart.index_of(p)
    value = flatness_residual_grid(adapted)[idx]
    if not np.isfinite(value):
        raise FlagError(f"no adapted frame neighborhood at grid node {idx}")
    return float(value)


# ---------------------------------------------------------------------------
# parallel frame integration

@dataclass
class ParallelFrameField:
    """Solution ``A`` of ``dA = -phi A`` along axis-ordered polylines."""

    adapted: AdaptedFrame
    values: np.ndarray  # (*shape, rank, rank)
    mask: np.ndarray
    origin: tuple
    axis_order: tuple


def _lagrange_matrix(n_nodes, positions, width):
    """Interpolation weights on integer nodes ``0..n_nodes-1`` at ``positions``."""
    w = np.zeros((len(positions), n_nodes))
    width = min(width, n_nodes)
    for row, x in enumerate(positions):
        i0 = int(np.floor(x)) - (width - 1) // 2
        i0 = min(max(i0, 0), n_nodes - width)
        nodes = np.arange(i0, i0 + width)
        for a in range(width):
            num, den = 1.0, 1.0
            for b in range(width):
                if a == b:
                    continue
                num *= x - nodes[b]
                den *= nodes[a] - nodes[b]
            w[row, nodes[a]] = num / den
    return w


def _cell_samples(line_values, order):
    """Nine interpolated matrices per cell (fractions j/8) along one line."""
    n = line_values.shape[0]
    cells = n - 1
    fractions = np.arange(9) / 8.0
    positions = (np.arange(cells)[:, None] + fractions[None, :]).reshape(-1)
    w = _lagrange_matrix(n, positions, order + 1)
    flat = line_values.reshape(n, -1)
    samples = (w @ flat).reshape(cells, 9, *line_values.shape[1:])
    return samples


def _rk4_cell(a, samples, h, sign):
    """Advance ``A`` across one cell: 4 Runge-Kutta steps on ``dA = sign * phi A``."""
    hs = h / 4.0
    for j in range(4):
        p0 = samples[2 * j]
        pm = samples[2 * j + 1]
        p1 = samples[2 * j + 2]
        k1 = sign * (p0 @ a)
        k2 = sign * (pm @ (a + 0.5 * hs * k1))
        k3 = sign * (pm @ (a + 0.5 * hs * k2))
        k4 = sign * (p1 @ (a + hs * k3))
        a = a + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return a


def integrate_parallel_frame(adapted, axis_order=None):
    """Integrate ``dA = -phi A`` outward from the base node.

    The grid is filled axis by axis: first along the ``axis_order[0]``
    line through the origin, then every filled node is extended along the
    next axis, and so on.  Within a cell the solver takes four classical
    Runge-Kutta steps on ``phi`` interpolated along the line.  Nodes
    beyond a masked node on their polyline stay unset.

    Raises :class:`IntegrationError` if any computed ``A`` turns
    numerically singular.
    """
    chart = adapted.chart
    m = chart.ndim
    k = adapted.rank
    if axis_order is None:
        axis_order = tuple(range(m))
    axis_order = tuple(int(a) for a in axis_order)
    if sorted(axis_order) != list(range(m)):
        raise ValueError(f"axis_order must permute {tuple(range(m))}")

    shape = chart.shape
    values = np.full(shape + (k, k), np.nan)
    mask = np.zeros(shape, dtype=bool)
    origin = adapted.origin
    if not adapted.mask[origin]:
        raise FlagError(f"base node {origin} has no adapted frame")
    values[origin] = np.eye(k)
    mask[origin] = True

    filled = [origin]
    for axis in axis_order:
        order = _axis_order(shape[axis])
        h = chart.spacings[axis]
        new_filled = []
        for node in filled:
            slicer = node[:axis] + (slice(None),) + node[axis + 1:]
            line_phi = adapted.phi[slicer][:, axis]  # (n_axis, k, k)
            line_ok = adapted.mask[slicer]
            samples = None
            if np.isfinite(line_phi).all():
                samples = _cell_samples(line_phi, order)
            i0 = node[axis]
            new_filled.append(node)
            for direction in (1, -1):
                i = i0
                a = values[node]
                while 0 <= i + direction < shape[axis]:
                    nxt = i + direction
                    if not line_ok[nxt]:
                        break
                    cell = min(i, nxt)
                    if samples is not None:
                        cs = samples[cell]
                    else:
                        window = _window_samples(line_phi, line_ok, cell, order)
                        if window is None:
                            break
                        cs = window
                    if direction == 1:
                        a = _rk4_cell(a, cs, h, -1.0)
                    else:
                        a = _rk4_cell(a, cs[::-1], h, 1.0)
                    target = node[:axis] + (nxt,) + node[axis + 1:]
                    values[target] = a
                    mask[target] = True
                    new_filled.append(target)
                    i = nxt
        filled = new_filled

    finite = mask.copy()
    flat = values.reshape(-1, k, k)
    for p in np.nonzero(mask.reshape(-1))[0]:
        if not np.isfinite(flat[p]).all():
            finite.reshape(-1)[p] = False
            continue
        s = np.linalg.svd(flat[p], compute_uv=False)
        if s[-1] <= s[0] * 1e-12 or s[-1] == 0.0:
            idx = np.unravel_index(p, shape)
            raise IntegrationError(
                f"parallel frame degenerates at grid node {tuple(int(i) for i in idx)}")
    return ParallelFrameField(adapted, values, finite, origin, axis_order)


def _window_samples(line_phi, line_ok, cell, order):
    """Cell samples when parts of the line are masked: interpolate on the
    largest contiguous valid window around the cell."""
    n = line_phi.shape[0]
    lo = cell
    while lo > 0 and line_ok[lo - 1] and np.isfinite(line_phi[lo - 1]).all():
        lo -= 1
    hi = cell + 1
    while hi < n - 1 and line_ok[hi + 1] and np.isfinite(line_phi[hi + 1]).all():
        hi += 1
    window = line_phi[lo:hi + 1]
    if not np.isfinite(window).all() or window.shape[0] < 2:
        return None
    fractions = (cell - lo) + np.arange(9) / 8.0
    w = _lagrange_matrix(window.shape[0], fractions,
                         min(order + 1, window.shape[0]))
    flat = window.reshape(window.shape[0], -1)
    return (w @ flat).reshape(9, *line_phi.shape[1:])


# ---------------------------------------------------------------------------
# sections

def make_parallel_section(pframe, w, tol=1e-6):
    """Parallel section through fiber vector ``w`` at the base node.

    ``w`` must lie in the subbundle fiber at the base node (within
    ``tol``, relative); otherwise no parallel extension inside the
    subbundle exists and :class:`MembershipError` is raised.
    """
    adapted = pframe.adapted
    k = adapted.rank
    origin = pframe.origin
    w = np.asarray(w, dtype=float)
    f0 = adapted.frame[origin][:, :k]
    c = f0.T @ w
    defect = np.linalg.norm(w - f0 @ c)
    if defect > tol * max(1.0, np.linalg.norm(w)):
        raise MembershipError(
            f"vector is {defect:.3e} away from the subbundle fiber at the base node")
    coeff = np.einsum("...ij,j->...i", pframe.values, c)
    vals = np.einsum("...ij,...j->...i", adapted.frame[..., :, :k], coeff)
    vals = np.where(pframe.mask[..., None] & adapted.mask[..., None], vals, np.nan)
    return SectionField(adapted.chart, values=vals)


def parallelism_residual(conn, section):
    """Max covariant-derivative norm over interior grid nodes.

    Grid-backed sections are differentiated with the chart stencils;
    nodes whose stencil touches missing values are skipped.
    """
    from .bundle import covariant_derivative_grid
    grid = covariant_derivative_grid(conn, section)
    norms = np.sqrt((grid ** 2).sum(axis=(-2, -1)))
    interior = norms[tuple(slice(1, -1) for _ in conn.chart.shape)]
    finite = interior[np.isfinite(interior)]
    if finite.size == 0:
        raise ValueError("no interior node has a finite covariant derivative")
    return float(finite.max())


# ---------------------------------------------------------------------------
# transport along explicit paths

def parallel_transport(conn, path, w0, steps=None):
    """Transport ``w0`` along the piecewise-linear path (vertex rows).

    Classical Runge-Kutta on ``dw/dt = -omega(gamma') w`` with the
    connection coefficients evaluated exactly at the sample points.
    ``steps`` fixes the step count per segment (default: resolves each
    segment at four steps per grid spacing, at least 32).
    """
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[1] != conn.chart.ndim:
        raise ValueError("path must be an array of coordinate rows")
    if len(path) < 2:
        raise ValueError("path needs at least two vertices")
    for vertex in path:
        if not conn.chart.contains(vertex):
            raise ValueError(f"path vertex {tuple(vertex)} outside the chart box")
    w = np.asarray(w0, dtype=float).copy()
    if w.shape != (conn.rank,):
        raise ValueError(f"w0 must have {conn.rank} components")
    h_min = min(conn.chart.spacings)
    for a, b in zip(path[:-1], path[1:]):
        v = b - a
        seg_len = float(np.linalg.norm(v))
        if seg_len == 0.0:
            continue
        n_steps = steps if steps is not None else max(32, int(np.ceil(
            4.0 * seg_len / h_min)))
        ts = np.linspace(0.0, 1.0, 2 * n_steps + 1)
        pts = a[None, :] + ts[:, None] * v[None, :]
        omega = _omega_along(conn, pts)
        # omega(gamma') contracted with the segment velocity
        gen = -np.einsum("pmij,m->pij", omega, v)
        h = 1.0 / n_steps
        for j in range(n_steps):
            g0, gm, g1 = gen[2 * j], gen[2 * j + 1], gen[2 * j + 2]
            k1 = g0 @ w
            k2 = gm @ (w + 0.5 * h * k1)
            k3 = gm @ (w + 0.5 * h * k2)
            k4 = g1 @ (w + h * k3)
            w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return w


def _omega_along(conn, points):
    """Connection matrices at arbitrary points, vectorized per entry."""
    n, m = conn.rank, conn.chart.ndim
    cols = [points[:, mu] for mu in range(m)]
    out = np.zeros((len(points), m, n, n))
    for i in range(n):
        for j in range(n):
            for mu in range(m):
                out[:, mu, i, j] = conn.omega[i, j, mu].on_grid(cols)
    return out
