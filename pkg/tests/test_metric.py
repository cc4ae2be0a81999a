"""Locally-metric detection and the positive-definite search.

The perturbed fixture is checked against exact symbolic arithmetic: the
curvature kernel of the induced connection on symmetric 2-tensors is
computed in closed form, and the covariant derivative of its generator
is shown to leave the kernel, so no parallel tensor survives.
"""

import numpy as np
import pytest
import sympy as sp

from flatbundle import (
    Chart,
    connection_from_christoffel,
    find_positive_definite,
    metric_check,
    principal_angles,
)
from flatbundle.flag import Subspace

from conftest import PERTURBED_GAMMA, zero_connection


LORENTZ_GAMMA = [
    [["0", "0"], ["0", "x"]],
    [["0", "x/(1+x^2)"], ["x/(1+x^2)", "0"]],
]


def lorentz_connection():
    chart = Chart(("x", "y"), (-0.8, -0.8), (0.8, 0.8), (33, 33))
    return connection_from_christoffel(LORENTZ_GAMMA, chart)


# ---------------------------------------------------------------------------
# positive-definite search

def test_find_pd_single_definite():
    found = find_positive_definite([np.diag([1.0, 0.5])])
    assert found is not None
    coeffs, min_eig = found
    assert coeffs.tolist() == [1.0]
    assert np.isclose(min_eig, 0.5)


def test_find_pd_single_negative_definite_flips_sign():
    coeffs, min_eig = find_positive_definite([np.diag([-1.0, -2.0])])
    assert coeffs.tolist() == [-1.0]
    assert np.isclose(min_eig, 1.0)


def test_find_pd_single_indefinite_or_degenerate():
    assert find_positive_definite([np.diag([1.0, -1.0])]) is None
    assert find_positive_definite([np.diag([1.0, 0.0])]) is None
    assert find_positive_definite([]) is None


def test_find_pd_traceless_span_has_none():
    # every combination of traceless symmetric matrices stays traceless
    span = [np.diag([1.0, -1.0]), np.array([[0.0, 1.0], [1.0, 0.0]])]
    assert find_positive_definite(span, samples_per_dim=512) is None


def test_find_pd_spanning_basis_recovers_identity():
    span = [np.diag([1.0, -1.0]), np.array([[0.0, 1.0], [1.0, 0.0]]),
            np.eye(2)]
    found = find_positive_definite(span, samples_per_dim=512)
    assert found is not None
    coeffs, min_eig = found
    combo = sum(c * t for c, t in zip(coeffs, span))
    assert np.linalg.eigvalsh(combo)[0] > 0
    assert min_eig > 0.5


# ---------------------------------------------------------------------------
# verdicts on the fixtures

def test_metric_check_requires_tangent_bundle(sphere_sym2):
    with pytest.raises(ValueError, match="tangent-bundle"):
        metric_check(sphere_sym2)


def test_sphere_is_metric(sphere_tangent):
    rep = metric_check(sphere_tangent)
    assert rep.verdict == "metric"
    assert rep.rank == 1
    assert rep.base_regular
    theta0 = rep.base_point[0]
    expected = np.diag([1.0, np.sin(theta0) ** 2])
    assert np.abs(rep.witness_at_base - expected).max() < 1e-6
    assert np.isclose(rep.witness_min_eigenvalue, np.sin(theta0) ** 2,
                      atol=1e-6)
    assert rep.residual < 1e-5
    assert len(rep.sections) == 1


def test_flat_connection_is_metric_with_identity_witness():
    conn = zero_connection(Chart(("x", "y"), (0.0, 0.0), (1.0, 1.0), (17, 17)), 2)
    rep = metric_check(conn)
    assert rep.verdict == "metric"
    assert rep.rank == 3
    assert np.abs(rep.witness_at_base - np.eye(2)).max() < 1e-8
    assert rep.residual < 1e-10


def test_perturbed_sphere_is_not_metric(perturbed_tangent):
    rep = metric_check(perturbed_tangent)
    assert rep.verdict == "not-metric"
    assert rep.rank == 0
    assert rep.flag.ranks == [1, 0]
    assert "no nonzero symmetric 2-tensor" in rep.detail
    assert rep.witness_at_base is None


def test_perturbed_sphere_symbolic_oracle():
    # exact arithmetic: the curvature kernel on symmetric tensors is one
    # dimensional, and the covariant derivative of its generator leaves it
    th = sp.Symbol("theta")
    c = sp.cot(th) + th
    omega_th = sp.Matrix([[0, 0], [0, c]])
    omega_ph = sp.Matrix([[0, -sp.sin(th) * sp.cos(th)], [c, 0]])
    r = sp.diff(omega_ph, th) + omega_th * omega_ph - omega_ph * omega_th
    assert sp.simplify(r[0, 0]) == 0 and sp.simplify(r[1, 1]) == 0
    a = sp.simplify(r[0, 1])
    b = sp.simplify(r[1, 0])
    assert sp.simplify(b - th * (2 * sp.cot(th) + th)) == 0
    # R^T B + B R = 0 for symmetric B=[[p,r],[r,q]] forces r=0 (since the
    # off-diagonal equations read b*r=0, a*r=0) and a*p + b*q = 0, so the
    # kernel is spanned by diag(b, -a) wherever a or b is nonzero
    assert a.subs(th, 1) != 0 and b.subs(th, 1) != 0
    p, q = b, -a
    membership = sp.diff(p, th) * q - (sp.diff(q, th) - 2 * c * q) * p
    value = float(membership.subs(th, 1).evalf())
    assert abs(value) > 1e-3

    # control: with the unperturbed coefficients the same bracket vanishes
    # identically, so the generator is parallel and the rank persists
    c0 = sp.cot(th)
    omega_ph0 = sp.Matrix([[0, -sp.sin(th) * sp.cos(th)], [c0, 0]])
    r0 = sp.diff(omega_ph0, th) + sp.Matrix([[0, 0], [0, c0]]) * omega_ph0 \
        - omega_ph0 * sp.Matrix([[0, 0], [0, c0]])
    a0 = sp.simplify(r0[0, 1])
    b0 = sp.simplify(r0[1, 0])
    p0, q0 = b0, -a0
    membership0 = sp.diff(p0, th) * q0 - (sp.diff(q0, th) - 2 * c0 * q0) * p0
    assert sp.simplify(membership0) == 0


def test_lorentz_family_is_inconclusive():
    rep = metric_check(lorentz_connection())
    assert rep.verdict == "inconclusive"
    assert rep.rank == 1
    assert rep.flag.ranks == [1, 1]
    assert "indefinite" in rep.detail
    assert rep.witness_at_base is None
    # the parallel generator at the base x=0 is diag(1,-1)/sqrt(2)
    gen = rep.sections[0].at_index(rep.flag.origin)
    target = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    assert min(np.abs(gen - target).max(), np.abs(gen + target).max()) < 1e-8


def test_lorentz_fiber_tracks_closed_form():
    conn = lorentz_connection()
    rep = metric_check(conn)
    idx = conn.chart.index_of((0.5, 0.0))
    x = conn.chart.point_of(idx)[0]
    target = np.array([1.0, -(1.0 + x ** 2), 0.0])
    fiber = rep.flag.field.subspace_at(idx)
    ref = Subspace.from_span(target.reshape(3, 1))
    assert principal_angles(fiber.basis, ref.basis).max() < 1e-8
