"""Detection of locally metric connections.

A tangent-bundle connection is locally a metric one exactly when some
positive-definite symmetric 2-tensor field is parallel for the induced
connection on symmetric 2-tensors.  The detector builds that induced
connection, computes its maximal flat subbundle, integrates the parallel
sections spanning it, and searches their span at the base point for a
positive-definite representative.

Verdicts are conservative: ``"metric"`` is only reported with an explicit
positive-definite parallel witness in hand, ``"not-metric"`` only when no
nonzero parallel symmetric tensor exists at all (final rank zero), and
``"inconclusive"`` otherwise, with the reason spelled out in ``detail``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.stats import qmc
from scipy.stats import norm as _norm

from .bundle import induce_sym2, sym2_basis
from .flag import derived_flag, is_regular
from .frobenius import (adapted_frame, integrate_parallel_frame,
                        make_parallel_section, parallelism_residual)

__all__ = ["MetricReport", "metric_check", "find_positive_definite"]


@dataclass
class MetricReport:
    """Outcome of the locally-metric check.

    ``verdict`` is ``"metric"``, ``"not-metric"``, or ``"inconclusive"``;
    ``detail`` explains it.  When a witness exists, ``witness_at_base``
    holds its coefficient matrix at the base point, normalized so the
    largest eigenvalue there equals one, ``witness_coefficients`` the
    combination of the parallel basis sections producing it, and
    ``residual`` its measured parallelism defect.
    """

    verdict: str
    rank: int
    detail: str
    flag: object
    base_point: tuple
    base_index: tuple
    base_regular: bool
    witness_coefficients: np.ndarray = None
    witness_at_base: np.ndarray = None
    witness_min_eigenvalue: float = None
    witness_section: object = None
    sections: list = dc_field(default_factory=list)
    residual: float = None
    tolerances: dict = dc_field(default_factory=dict)


def _unit_sphere_samples(k, count):
    """Deterministic low-discrepancy directions on the unit sphere in R^k."""
    sampler = qmc.Sobol(d=k, scramble=False)
    m = int(np.ceil(np.log2(count + 1)))
    pts = sampler.random_base2(m=m)[1:count + 1]  # drop the all-zero point
    z = _norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(z, axis=1)
    norms[norms == 0] = 1.0
    return z / norms[:, None]


def find_positive_definite(tensors, samples_per_dim=4096):
    """Search the span of symmetric matrices for a positive-definite one.

    For a single generator the answer is exact (its own definiteness, up
    to sign).  For ``k >= 2`` the unit sphere of coefficient vectors is
    scanned with a deterministic low-discrepancy sequence
    (``samples_per_dim * k`` directions, each with its antipode), keeping
    the combination with the largest minimum eigenvalue.

    Returns ``(coefficients, min_eigenvalue)`` of the best strictly
    positive-definite combination, or ``None`` if the scan finds none.
    """
    tensors = [np.asarray(t, dtype=float) for t in tensors]
    if not tensors:
        return None
    k = len(tensors)
    stack = np.stack(tensors)

    if k == 1:
        eig = np.linalg.eigvalsh(stack[0])
        if eig[0] > 0:
            return np.array([1.0]), float(eig[0])
        if eig[-1] < 0:
            return np.array([-1.0]), float(-eig[-1])
        return None

    candidates = []
    # the identity is the natural first guess: project it onto the span
    gram = np.einsum("aij,bij->ab", stack, stack)
    rhs = np.einsum("aij,ij->a", stack, np.eye(stack.shape[1]))
    try:
        c0 = np.linalg.solve(gram, rhs)
        if np.linalg.norm(c0) > 0:
            candidates.append(c0 / np.linalg.norm(c0))
    except np.linalg.LinAlgError:
        pass
    candidates.extend(_unit_sphere_samples(k, samples_per_dim * k))

    best_c, best_eig = None, -np.inf
    for c in candidates:
        mat = np.einsum("a,aij->ij", c, stack)
        eig = np.linalg.eigvalsh(mat)
        for cc, lo in ((c, eig[0]), (-c, -eig[-1])):
            if lo > best_eig:
                best_eig = lo
                best_c = cc
    if best_eig > 0:
        return np.asarray(best_c, dtype=float), float(best_eig)
    return None


def metric_check(conn, base_point=None, tol_rank=1e-8, tol_stab=1e-6,
                 alpha_floor=None, residual_tol=1e-5, samples_per_dim=4096):
    """Decide whether a tangent-bundle connection is locally a metric one.

    ``conn`` must be a connection on the tangent bundle (fiber rank equal
    to the chart dimension); the induced connection on symmetric
    2-tensors is built internally.
    """
    chart = conn.chart
    m = chart.ndim
    if conn.rank != m:
        raise ValueError("metric check needs a tangent-bundle connection")
    if base_point is None:
        base_point = chart.point_of(chart.center_index())
    base_point = tuple(float(x) for x in base_point)
    base_index = chart.index_of(base_point)

    sym2 = induce_sym2(conn)
    flag = derived_flag(sym2, tol_rank=tol_rank, tol_stab=tol_stab,
                        alpha_floor=alpha_floor, origin=base_index)
    base_regular = is_regular(flag, base_index)
    tolerances = dict(flag.tolerances)
    tolerances["residual_tol"] = residual_tol

    rank = flag.rank_final
    if rank == 0:
        return MetricReport(
            verdict="not-metric", rank=0,
            detail=("no nonzero symmetric 2-tensor is parallel; "
                    "no metric is preserved on this chart"),
            flag=flag, base_point=base_point, base_index=base_index,
            base_regular=base_regular, tolerances=tolerances)

    adapted = adapted_frame(sym2, flag.field, flag.origin)
    pframe = integrate_parallel_frame(adapted)
    f0 = adapted.frame[flag.origin][:, :rank]
    sections = [make_parallel_section(pframe, f0[:, i]) for i in range(rank)]

    mats, _ = sym2_basis(m)
    basis_stack = np.stack(mats)

    def tensor_at(vec):
        return np.einsum("a,aij->ij", vec, basis_stack)

    base_tensors = [tensor_at(s.at_index(flag.origin)) for s in sections]
    found = find_positive_definite(base_tensors, samples_per_dim=samples_per_dim)

    if found is None:
        detail = ("the space of parallel symmetric 2-tensors has rank "
                  f"{rank} but contains no positive-definite element at the "
                  "base point")
        if rank == 1:
            detail += (" (its generator is indefinite or degenerate, so no "
                       "combination can become definite)")
        return MetricReport(
            verdict="inconclusive", rank=rank, detail=detail, flag=flag,
            base_point=base_point, base_index=base_index,
            base_regular=base_regular, sections=sections,
            tolerances=tolerances)

    coeffs, min_eig = found
    witness_vals = sum(c * s.sample() for c, s in zip(coeffs, sections))
    witness_mat = tensor_at(witness_vals[flag.origin])
    eig = np.linalg.eigvalsh(witness_mat)
    scale = 1.0 / eig[-1]
    coeffs = coeffs * scale
    witness_vals = witness_vals * scale
    witness_mat = witness_mat * scale
    min_eig = float(np.linalg.eigvalsh(witness_mat)[0])

    from .bundle import SectionField
    witness_section = SectionField(chart, values=witness_vals)
    residual = parallelism_residual(sym2, witness_section)

    if residual > residual_tol:
        return MetricReport(
            verdict="inconclusive", rank=rank,
            detail=(f"a positive-definite combination exists but its "
                    f"parallelism residual {residual:.3e} exceeds "
                    f"{residual_tol:.1e}"),
            flag=flag, base_point=base_point, base_index=base_index,
            base_regular=base_regular, witness_coefficients=coeffs,
            witness_at_base=witness_mat, witness_min_eigenvalue=min_eig,
            witness_section=witness_section, sections=sections,
            residual=residual, tolerances=tolerances)

    return MetricReport(
        verdict="metric", rank=rank,
        detail=("a positive-definite parallel symmetric 2-tensor exists; "
                "the connection preserves a metric near the base point"),
        flag=flag, base_point=base_point, base_index=base_index,
        base_regular=base_regular, witness_coefficients=coeffs,
        witness_at_base=witness_mat, witness_min_eigenvalue=min_eig,
        witness_section=witness_section, sections=sections,
        residual=residual, tolerances=tolerances)
