"""Derived flag of a connection: the maximal flat subbundle.

The flag starts from the common kernel of all curvature operators and
repeatedly cuts by the kernel of the second fundamental form (the
component of the covariant derivative leaving the current subbundle),
restricting to the locally-constant-rank set after every step.  When the
rank sequence stabilizes, the surviving subbundle is the largest one on
which the connection restricts flatly.

Numerically, fibers are tracked per grid node, frames are gauge-aligned
by sweeping outward from a base node, and frame derivatives use the
chart's finite-difference stencils.  All rank decisions combine a
relative singular-value cutoff with an absolute floor tied to the grid
spacing, since differentiated frames carry truncation noise.

Everything here is deterministic: sweeps visit nodes in a fixed order
and no randomness or threading is involved.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .bundle import Chart, Connection, grid_derivative

__all__ = [
    "Subspace",
    "SubbundleField",
    "FrameField",
    "FlagReport",
    "FlagError",
    "common_kernel",
    "smooth_refine",
    "gauge_align",
    "second_fundamental_form",
    "sff_kernel",
    "derived_flag",
    "is_regular",
    "principal_angles",
    "default_alpha_floor",
]


class FlagError(RuntimeError):
    """Flag construction could not proceed (e.g. no regular points left)."""

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# subspaces

@dataclass(frozen=True)
class Subspace:
    """Linear subspace of the fiber, stored as orthonormal basis columns."""

    basis: np.ndarray  # (N, k), orthonormal columns

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise ValueError("basis must be a 2-d array of column vectors")
        object.__setattr__(self, "basis", b)

    @property
    def dimension(self):
        return self.basis.shape[0]

    @property
    def rank(self):
        return self.basis.shape[1]

    @classmethod
    def from_span(cls, vectors, tol=1e-10):
        """Orthonormalize arbitrary spanning columns (drops dependent ones)."""
        v = np.asarray(vectors, dtype=float)
        if v.size == 0:
            return cls(v.reshape(v.shape[0] if v.ndim == 2 else 0, 0))
        u, s, _ = np.linalg.svd(v, full_matrices=False)
        keep = s > (tol * s[0] if s.size and s[0] > 0 else tol)
        return cls(u[:, : int(np.count_nonzero(keep))])

    @classmethod
    def full(cls, n):
        return cls(np.eye(n))

    def contains(self, vector, tol=1e-8):
        v = np.asarray(vector, dtype=float)
        r = v - self.basis @ (self.basis.T @ v)
        return float(np.linalg.norm(r)) <= tol * max(1.0, float(np.linalg.norm(v)))

    def angles_to(self, other):
        return principal_angles(self.basis, other.basis)


def principal_angles(a, b):
    """Principal angles (radians, decreasing) between column spans.

    Both inputs must have orthonormal columns; ``min(rank_a, rank_b)``
    angles are returned.  Small angles are recovered from the projection
    residual, so they resolve down to machine precision instead of the
    sqrt(eps) floor of a plain arccos.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[1] == 0 or b.shape[1] == 0:
        return np.zeros(0)
    if a.shape[1] < b.shape[1]:
        a, b = b, a
    q = a.T @ b
    cos = np.clip(np.linalg.svd(q, compute_uv=False), -1.0, 1.0)
    sin = np.clip(np.linalg.svd(b - a @ q, compute_uv=False), -1.0, 1.0)
    # cos descending pairs with sin ascending
    sin = np.sort(sin)
    angles = np.where(cos ** 2 > 0.5, np.arcsin(sin), np.arccos(cos))
    return np.sort(angles)[::-1]


def common_kernel(matrices, tol=1e-8):
    """Intersection of the kernels of a family of operators on one fiber.

    The matrices are stacked vertically and the kernel is read off the
    singular value decomposition; singular values at or below
    ``max(tol * sigma_max, 1e-12)`` count as zero.
    """
    mats = [np.asarray(m, dtype=float) for m in matrices]
    if not mats:
        raise ValueError("need at least one matrix")
    n = mats[0].shape[1]
    for m in mats:
        if m.ndim != 2 or m.shape[1] != n:
            raise ValueError("matrices must share their column dimension")
    stacked = np.vstack(mats)
    _, s, vh = np.linalg.svd(stacked)
    sigma_max = s[0] if s.size else 0.0
    cutoff = max(tol * sigma_max, 1e-12)
    r = int(np.count_nonzero(s > cutoff))
    return Subspace(vh[r:].T.copy())


# ---------------------------------------------------------------------------
# subbundle fields over the grid

class SubbundleField:
    """A subspace of the fiber attached to every grid node.

    ``bases`` is an object array over the grid whose valid entries are
    orthonormal ``(N, k_p)`` bases; ``ranks`` holds ``k_p`` (or -1 where
    masked out) and ``mask`` flags the nodes still considered regular.
    """

    def __init__(self, chart, dimension, bases, ranks, mask):
        self.chart = chart
        self.dimension = int(dimension)
        self.bases = bases
        self.ranks = np.asarray(ranks)
        self.mask = np.asarray(mask, dtype=bool)
        if self.bases.shape != chart.shape or self.ranks.shape != chart.shape \
                or self.mask.shape != chart.shape:
            raise ValueError("grid arrays must have the chart's shape")

    @classmethod
    def from_fiber_lists(cls, chart, dimension, fibers):
        bases = np.empty(chart.shape, dtype=object)
        ranks = np.full(chart.shape, -1, dtype=int)
        mask = np.zeros(chart.shape, dtype=bool)
        for idx, b in fibers:
            bases[idx] = b
            ranks[idx] = b.shape[1]
            mask[idx] = True
        return cls(chart, dimension, bases, ranks, mask)

    def subspace_at(self, idx):
        idx = tuple(idx)
        if not self.mask[idx]:
            return None
        return Subspace(self.bases[idx])

    def rank_at(self, idx):
        return int(self.ranks[tuple(idx)])

    def regular_fraction(self):
        return float(np.count_nonzero(self.mask)) / self.mask.size

    def irregular_indices(self):
        return [tuple(int(i) for i in idx) for idx in np.argwhere(~self.mask)]

    def with_mask(self, mask):
        return SubbundleField(self.chart, self.dimension, self.bases,
                              self.ranks, mask)


def smooth_refine(field):
    """Restrict to the locally-constant-rank set.

    A node stays regular when its rank equals the minimum rank over its
    full grid neighborhood (3 nodes per axis, truncated at the boundary);
    masked nodes place no constraint.  Fibers are untouched.
    """
    big = field.dimension + 1
    padded = np.where(field.mask, field.ranks, big)
    min_nb = ndimage.minimum_filter(padded, size=3, mode="nearest")
    new_mask = field.mask & (field.ranks <= min_nb)
    return field.with_mask(new_mask)


# ---------------------------------------------------------------------------
# gauge alignment

@dataclass
class FrameField:
    """Smoothly aligned orthonormal frame of a constant-rank subbundle."""

    chart: Chart
    values: np.ndarray  # (*shape, N, k); NaN where not aligned
    mask: np.ndarray    # nodes successfully aligned
    origin: tuple
    rank: int

    def at(self, idx):
        return self.values[tuple(idx)]


def _sweep_order(shape, origin):
    """Deterministic visit order: by L1 distance from the origin node, then
    lexicographically; each node's predecessor steps its last differing
    axis one node toward the origin (matching the integration polylines)."""
    idxs = list(np.ndindex(*shape))
    idxs.sort(key=lambda idx: (sum(abs(i - o) for i, o in zip(idx, origin)), idx))
    order = []
    for idx in idxs:
        if idx == tuple(origin):
            pred = None
        else:
            last = max(ax for ax, (i, o) in enumerate(zip(idx, origin)) if i != o)
            step = 1 if idx[last] < origin[last] else -1
            pred = idx[:last] + (idx[last] + step,) + idx[last + 1:]
        order.append((idx, pred))
    return order


def gauge_align(field, origin):
    """Choose per-node orthonormal bases varying smoothly away from ``origin``.

    Sweeping outward, each node's basis is the orthogonal polar alignment
    of its predecessor's frame inside the node's own fiber.  Nodes where
    the fiber tilts too far from the predecessor's (largest principal
    angle at or beyond pi/2 - 0.1), differs in rank, or whose predecessor
    failed are dropped from the frame's mask.
    """
    origin = tuple(origin)
    if not field.mask[origin]:
        raise FlagError(f"alignment origin {origin} is not a regular node")
    k = field.rank_at(origin)
    n = field.dimension
    shape = field.chart.shape
    values = np.full(shape + (n, k), np.nan)
    out_mask = np.zeros(shape, dtype=bool)

    sigma_min_ok = np.sin(0.1)  # largest principal angle < pi/2 - 0.1

    base = np.array(field.bases[origin], dtype=float)
    # deterministic sign convention at the origin
    for c in range(base.shape[1]):
        lead = int(np.argmax(np.abs(base[:, c])))
        if base[lead, c] < 0:
            base[:, c] = -base[:, c]
    values[origin] = base
    out_mask[origin] = True

    for idx, pred in _sweep_order(shape, origin):
        if pred is None:
            continue
        if not field.mask[idx] or field.ranks[idx] != k or not out_mask[pred]:
            continue
        b = field.bases[idx]
        m = b.T @ values[pred]
        u, s, vt = np.linalg.svd(m)
        if s.size and s[-1] <= sigma_min_ok:
            continue  # fiber swings too far: alignment failure, node dropped
        values[idx] = b @ (u @ vt)
        out_mask[idx] = True

    return FrameField(field.chart, values, out_mask, origin, k)


# ---------------------------------------------------------------------------
# second fundamental form

def default_alpha_floor(chart):
    """Absolute singular-value floor for derivative-of-frame rank decisions.

    Frame derivatives come from finite differences, so entries carry
    truncation noise; 3 h_max^3 sits well above that noise for the
    stencil orders in use while staying far below order-one geometry.
    """
    return 3.0 * max(chart.spacings) ** 3


def _sff_grid(conn, frame):
    """Second-fundamental-form data on the whole grid.

    Returns ``(alpha, complement, valid)`` where ``alpha`` has shape
    ``(*shape, m, N-k, k)``, ``complement`` has orthonormal columns
    spanning the fiber orthogonal to the frame, and ``valid`` marks nodes
    where every finite-difference stencil stayed inside the aligned set.
    """
    chart = conn.chart
    m = chart.ndim
    n, k = conn.rank, frame.rank
    f = frame.values
    omega = conn.omega_grid()

    df = np.stack([grid_derivative(f, chart, mu, mask=frame.mask)
                   for mu in range(m)], axis=-3)
    covf = df + np.einsum("...mij,...jk->...mik", omega, f)

    shape = chart.shape
    n_points = int(np.prod(shape))
    flat_mask = frame.mask.reshape(-1)
    comp = np.full(shape + (n, n - k), np.nan)
    comp_flat = comp.reshape(n_points, n, n - k)
    f_flat = f.reshape(n_points, n, k)
    valid_idx = np.nonzero(flat_mask)[0]
    if valid_idx.size:
        u, _, _ = np.linalg.svd(f_flat[valid_idx], full_matrices=True)
        comp_flat[valid_idx] = u[:, :, k:]

    alpha = np.einsum("...ia,...mib->...mab", comp, covf)
    valid = frame.mask & np.isfinite(alpha).all(axis=(-3, -2, -1))
    return alpha, comp, valid


def second_fundamental_form(conn, frame, p):
    """Second fundamental form of the framed subbundle at point ``p``.

    The returned matrix stacks, over the coordinate directions, the
    components of the frame's covariant derivative orthogonal to the
    subbundle; shape ``(m * (N - k), k)``.  Its kernel consists of the
    fiber directions whose derivative stays inside the subbundle.
    """
    idx = conn.chart.index_of(p)
    alpha, _, valid = _sff_grid(conn, frame)
    if not valid[idx]:
        raise FlagError(f"no aligned frame neighborhood at grid node {idx}")
    a = alpha[idx]
    m, c, k = a.shape
    return a.reshape(m * c, k)


def sff_kernel(alpha, frame_basis, tol=1e-8, floor=0.0):
    """Kernel of a second-fundamental-form matrix, lifted to the fiber.

    ``alpha`` is ``(rows, k)`` (stacked directions), ``frame_basis`` the
    ``(N, k)`` frame it was computed in.  Singular values at or below
    ``max(tol * sigma_max, floor)`` count as zero; the kernel's
    coefficient vectors are pushed through the frame and orthonormalized,
    so the result is the same subspace for any frame spanning the bundle.
    """
    alpha = np.asarray(alpha, dtype=float)
    fb = np.asarray(frame_basis, dtype=float)
    k = fb.shape[1]
    if alpha.shape[-1] != k:
        raise ValueError("alpha column count must match frame rank")
    if alpha.size == 0:
        return Subspace.from_span(fb)
    _, s, vh = np.linalg.svd(alpha.reshape(-1, k))
    sigma_max = s[0] if s.size else 0.0
    cutoff = max(tol * sigma_max, floor)
    r = int(np.count_nonzero(s > cutoff))
    return Subspace.from_span(fb @ vh[r:].T)


# ---------------------------------------------------------------------------
# the derived flag

@dataclass
class FlagReport:
    """Result of the derived-flag construction.

    ``ranks`` lists the fiber rank at the base node for the initial
    curvature kernel and after each derivative cut; ``iterations`` counts
    the cuts performed.  ``field`` is the final subbundle, ``stages``
    every intermediate one.  Regularity statements hold only at the
    resolution of the chart grid (see ``caveat``).
    """

    chart: Chart
    ranks: list
    field: SubbundleField
    stages: list
    origin_requested: tuple
    origin: tuple
    tolerances: dict
    diagnostics: dict = dc_field(default_factory=dict)
    caveat: str = ("rank and regularity are certified only at the grid "
                   "resolution; finer structure may be missed")

    @property
    def iterations(self):
        return len(self.ranks) - 1

    @property
    def rank_final(self):
        return int(self.ranks[-1])


def _nearest_regular(mask, origin):
    if mask[origin]:
        return origin
    best = None
    for idx in np.ndindex(*mask.shape):
        if not mask[idx]:
            continue
        key = (sum(abs(i - o) for i, o in zip(idx, origin)), idx)
        if best is None or key < best[0]:
            best = (key, idx)
    if best is None:
        return None
    return best[1]


def _kernel_field(chart, mats, tol):
    """Pointwise curvature kernels from stacked operator samples."""
    shape = chart.shape
    n = mats.shape[-1]
    stacked = mats.reshape(shape + (-1, n)).reshape(-1, mats.shape[-3] * n, n)
    _, s, vh = np.linalg.svd(stacked)
    sigma_max = s[:, 0] if s.shape[1] else np.zeros(len(stacked))
    cutoffs = np.maximum(tol * sigma_max, 1e-12)
    ranks_flat = (s > cutoffs[:, None]).sum(axis=1)
    bases = np.empty(shape, dtype=object)
    bases_flat = bases.reshape(-1)
    for p in range(stacked.shape[0]):
        bases_flat[p] = vh[p, ranks_flat[p]:, :].T.copy()
    ranks = (n - ranks_flat).reshape(shape).astype(int)
    mask = np.ones(shape, dtype=bool)
    return SubbundleField(chart, n, bases, ranks, mask)


def _cut_by_sff(conn, field, origin, tol, floor):
    """One derivative cut: kernel of the second fundamental form, refined."""
    frame = gauge_align(field, origin)
    alpha, _, valid = _sff_grid(conn, frame)
    shape = conn.chart.shape
    n = conn.rank
    bases = np.empty(shape, dtype=object)
    ranks = np.full(shape, -1, dtype=int)
    mask = np.zeros(shape, dtype=bool)

    flat_valid = valid.reshape(-1)
    idx_valid = np.nonzero(flat_valid)[0]
    if idx_valid.size == 0:
        return SubbundleField(conn.chart, n, bases, ranks, mask)

    m = conn.chart.ndim
    k = frame.rank
    n_points = int(np.prod(shape))
    a_flat = alpha.reshape(n_points, m * (n - k), k)[idx_valid]
    f_flat = frame.values.reshape(n_points, n, k)[idx_valid]
    bases_flat = bases.reshape(-1)
    ranks_flat = ranks.reshape(-1)
    mask_flat = mask.reshape(-1)

    if a_flat.shape[1] == 0:
        for p, fi in zip(idx_valid, f_flat):
            bases_flat[p] = fi.copy()
            ranks_flat[p] = k
            mask_flat[p] = True
    else:
        _, s, vh = np.linalg.svd(a_flat)
        sigma_max = s[:, 0]
        cutoffs = np.maximum(tol * sigma_max, floor)
        nz = (s > cutoffs[:, None]).sum(axis=1)
        for p, fi, vhp, r in zip(idx_valid, f_flat, vh, nz):
            bases_flat[p] = fi @ vhp[r:, :].T
            ranks_flat[p] = k - r
            mask_flat[p] = True

    return SubbundleField(conn.chart, n, bases, ranks, mask)


def _stage_angles(prev, new):
    """Max principal angle between the new fibers and the previous ones."""
    common = prev.mask & new.mask
    worst = 0.0
    for idx in np.argwhere(common):
        idx = tuple(idx)
        a = new.bases[idx]
        b = prev.bases[idx]
        if a.shape[1] == 0 or b.shape[1] == 0:
            continue
        ang = principal_angles(a, b)
        if ang.size and ang[0] > worst:
            worst = float(ang[0])
    return worst


def derived_flag(conn, tol_rank=1e-8, tol_stab=1e-6, alpha_floor=None,
                 origin=None, max_iterations=None):
    """Compute the maximal flat subbundle by iterated derivative cuts.

    Parameters
    ----------
    conn : Connection
    tol_rank : float
        Relative singular-value cutoff for every rank decision.
    tol_stab : float
        Largest principal angle tolerated when declaring two consecutive
        stages equal.
    alpha_floor : float, optional
        Absolute cutoff for second-fundamental-form singular values;
        defaults to :func:`default_alpha_floor` of the chart.
    origin : tuple, optional
        Grid index of the base node (defaults to the center node).  If
        the node turns irregular at some stage, the nearest regular node
        is used for alignment and reporting, and recorded in the report.
    max_iterations : int, optional
        Cap on derivative cuts; defaults to ``rank + 1``.

    Raises :class:`FlagError` when no regular nodes remain at some stage
    or the rank sequence fails to stabilize within the cap.
    """
    chart = conn.chart
    if alpha_floor is None:
        alpha_floor = default_alpha_floor(chart)
    if origin is None:
        origin = chart.center_index()
    origin = tuple(int(i) for i in origin)
    for i, nmax in zip(origin, chart.shape):
        if not 0 <= i < nmax:
            raise ValueError(f"origin index {origin} outside grid {chart.shape}")
    if max_iterations is None:
        max_iterations = conn.rank + 1

    mats = conn.curvature_grid()
    current = smooth_refine(_kernel_field(chart, mats, tol_rank))
    if not current.mask.any():
        raise FlagError("no regular nodes remain", stage=0)

    origin_requested = origin
    origin = _nearest_regular(current.mask, origin)
    stages = [current]
    ranks = [current.rank_at(origin)]
    diagnostics = {"nesting_angles": [], "regular_fractions":
                   [current.regular_fraction()]}

    stabilized = ranks[0] == 0
    for it in range(1, max_iterations + 1):
        if stabilized:
            break
        new = smooth_refine(_cut_by_sff(conn, current, origin, tol_rank,
                                        alpha_floor))
        if not new.mask.any():
            raise FlagError("no regular nodes remain", stage=it)
        if not new.mask[origin]:
            origin = _nearest_regular(new.mask, origin)
        ranks.append(new.rank_at(origin))
        diagnostics["regular_fractions"].append(new.regular_fraction())
        diagnostics["nesting_angles"].append(_stage_angles(current, new))
        stages.append(new)

        common = current.mask & new.mask
        same_rank = bool(np.all(current.ranks[common] == new.ranks[common]))
        if same_rank and diagnostics["nesting_angles"][-1] < tol_stab:
            stabilized = True
        elif ranks[-1] == 0:
            stabilized = True
        current = new

    if not stabilized:
        raise FlagError("rank sequence did not stabilize within the iteration cap",
                        stage=max_iterations)

    return FlagReport(
        chart=chart,
        ranks=[int(r) for r in ranks],
        field=current,
        stages=stages,
        origin_requested=origin_requested,
        origin=origin,
        tolerances={"tol_rank": tol_rank, "tol_stab": tol_stab,
                    "alpha_floor": alpha_floor},
        diagnostics=diagnostics,
    )


def is_regular(report, idx):
    """Whether the final subbundle has locally constant rank at grid node ``idx``.

    True when the node and its whole grid neighborhood survived every
    stage with one common rank.  Raises ``IndexError`` outside the grid.
    """
    idx = tuple(int(i) for i in idx)
    shape = report.chart.shape
    for i, nmax in zip(idx, shape):
        if not 0 <= i < nmax:
            raise IndexError(f"grid index {idx} outside shape {shape}")
    f = report.field
    if not f.mask[idx]:
        return False
    r = f.ranks[idx]
    ranges = [range(max(0, i - 1), min(nmax, i + 2))
              for i, nmax in zip(idx, shape)]
    for nb in itertools.product(*ranges):
        if not f.mask[nb] or f.ranks[nb] != r:
            return False
    return True
