"""Shared fixtures: reference connections and random-connection builders.

Heavy pipelines (64x64 flag runs, frame integration) are session scoped so
the suite computes each once.  The random builders produce connections with
known flat-subbundle structure: pure-gauge (flat, full rank), generic
(empty curvature kernel), and a flat block conjugated into general position
by a constant rotation.
"""

import numpy as np
import pytest

from flatbundle import (
    Chart,
    Connection,
    ScalarField,
    adapted_frame,
    connection_from_christoffel,
    derived_flag,
    frame_change,
    induce_sym2,
    integrate_parallel_frame,
    make_parallel_section,
    parse_scalar_field,
)

SPHERE_BASE = (np.pi / 2, 1.0)

SPHERE_GAMMA = [
    [["0", "0"], ["0", "-sin(theta)*cos(theta)"]],
    [["0", "cot(theta)"], ["cot(theta)", "0"]],
]

PERTURBED_GAMMA = [
    [["0", "0"], ["0", "-sin(theta)*cos(theta)"]],
    [["0", "cot(theta) + theta"], ["cot(theta) + theta", "0"]],
]


def sphere_chart_of(n):
    return Chart(("theta", "phi"), (0.3, 0.0), (np.pi - 0.3, 3.0), (n, n))


@pytest.fixture(scope="session")
def sphere_chart():
    return sphere_chart_of(64)


@pytest.fixture(scope="session")
def sphere_tangent(sphere_chart):
    return connection_from_christoffel(SPHERE_GAMMA, sphere_chart)


@pytest.fixture(scope="session")
def sphere_sym2(sphere_tangent):
    return induce_sym2(sphere_tangent)


@pytest.fixture(scope="session")
def sphere_flag(sphere_sym2):
    origin = sphere_sym2.chart.index_of(SPHERE_BASE)
    return derived_flag(sphere_sym2, origin=origin)


@pytest.fixture(scope="session")
def sphere_adapted(sphere_sym2, sphere_flag):
    return adapted_frame(sphere_sym2, sphere_flag.field, origin=sphere_flag.origin)


@pytest.fixture(scope="session")
def sphere_pframe(sphere_adapted):
    return integrate_parallel_frame(sphere_adapted)


@pytest.fixture(scope="session")
def sphere_section(sphere_flag, sphere_pframe):
    w = sphere_flag.field.subspace_at(sphere_flag.origin).basis[:, 0]
    return make_parallel_section(sphere_pframe, w)


@pytest.fixture(scope="session")
def perturbed_tangent():
    return connection_from_christoffel(PERTURBED_GAMMA, sphere_chart_of(64))


def derived_connection(shape=(64, 64)):
    """Rank-3 fixture: grad e1 = e2 x dy, grad e2 = 0, grad e3 = e1 dx."""
    chart = Chart(("x", "y"), (0.2, 0.2), (2.0, 2.0), shape)
    omega = np.full((3, 3, 2), "0", dtype=object)
    omega[1, 0, 1] = "x"
    omega[0, 2, 0] = "1"
    return Connection(chart, 3, omega)


@pytest.fixture(scope="session")
def derived_conn():
    return derived_connection()


@pytest.fixture(scope="session")
def derived_report(derived_conn):
    origin = derived_conn.chart.index_of((1.1, 1.1))
    return derived_flag(derived_conn, origin=origin)


def zero_connection(chart, n):
    return Connection(chart, n, np.full((n, n, chart.ndim), "0", dtype=object))


@pytest.fixture(scope="session")
def trivial_conn():
    return zero_connection(Chart(("x", "y"), (0.0, 0.0), (1.0, 1.0), (17, 17)), 4)


@pytest.fixture(scope="session")
def trivial_report(trivial_conn):
    return derived_flag(trivial_conn, origin=trivial_conn.chart.index_of((0.5, 0.5)))


# ---------------------------------------------------------------------------
# random-connection builders

def _identity_fields(n, coords):
    one = ScalarField.constant(1.0, coords)
    zero = ScalarField.constant(0.0, coords)
    ident = np.full((n, n), zero, dtype=object)
    for i in range(n):
        ident[i, i] = one
    return ident


def _mat_mul(a, b):
    n, mid, p = a.shape[0], a.shape[1], b.shape[1]
    out = np.empty((n, p), dtype=object)
    for i in range(n):
        for j in range(p):
            acc = a[i, 0] * b[0, j]
            for k in range(1, mid):
                acc = acc + a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def _triangular_inverse(t, coords):
    # unit-triangular T = I + M with M nilpotent: T^-1 = I - M + M^2 - ...
    n = t.shape[0]
    ident = _identity_fields(n, coords)
    nil = t - ident
    acc = ident
    term = ident
    for p in range(1, n):
        term = _mat_mul(term, nil)
        acc = acc + term if p % 2 == 0 else acc - term
    return acc


def _small_field(rng, coords, amplitude):
    c = round(float(rng.uniform(-amplitude, amplitude)), 6)
    u = coords[int(rng.integers(len(coords)))]
    v = coords[int(rng.integers(len(coords)))]
    kind = int(rng.integers(4))
    if kind == 0:
        src = f"{c}*sin({u})"
    elif kind == 1:
        src = f"{c}*cos({u})*{v}"
    elif kind == 2:
        src = f"{c}*{u}*{v}"
    else:
        src = f"{c}*{u}^2"
    return src


def random_unimodular_gauge(chart, n, rng, amplitude=0.4):
    """Product of unit-triangular factors; returns (g, exact inverse)."""
    coords = chart.coords
    lower = _identity_fields(n, coords)
    upper = _identity_fields(n, coords)
    for i in range(n):
        for j in range(n):
            if i > j:
                lower[i, j] = parse_scalar_field(_small_field(rng, coords, amplitude), coords)
            elif i < j:
                upper[i, j] = parse_scalar_field(_small_field(rng, coords, amplitude), coords)
    g = _mat_mul(lower, upper)
    g_inv = _mat_mul(_triangular_inverse(upper, coords), _triangular_inverse(lower, coords))
    return g, g_inv


def random_flat_connection(chart, n, rng):
    """Pure-gauge coefficients g^-1 dg: flat, so the whole bundle survives."""
    g, g_inv = random_unimodular_gauge(chart, n, rng)
    return frame_change(zero_connection(chart, n), g, g_inv), (g, g_inv)


def random_generic_connection(chart, n, rng, amplitude=0.8):
    """Dense low-frequency coefficients; the curvature kernel is empty."""
    omega = np.empty((n, n, chart.ndim), dtype=object)
    for i in range(n):
        for j in range(n):
            for mu in range(chart.ndim):
                omega[i, j, mu] = _small_field(rng, chart.coords, amplitude)
    return Connection(chart, n, omega)


def random_block_connection(chart, k, rng):
    """Flat rank-k block plus a fully curved 2x2 block, rotated by constant Q.

    Returns (connection, expected_fiber) where expected_fiber is the (k+2, k)
    orthonormal basis of the flat subbundle in the rotated frame.
    """
    n = k + 2
    x = chart.coords[0]
    omega = np.full((n, n, chart.ndim), "0", dtype=object)
    omega[k, k + 1, 1] = x
    omega[k + 1, k, 1] = x
    conn = Connection(chart, n, omega)
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    rotated = frame_change(conn, q, q.T)
    return rotated, q.T[:, :k].copy()


def random_point_in(chart, rng, margin=0.05):
    lows = np.asarray(chart.lows)
    highs = np.asarray(chart.highs)
    span = highs - lows
    return tuple(rng.uniform(lows + margin * span, highs - margin * span))


def random_suite():
    """Twenty random connections cycling through the three families.

    Returns (kind, connection, expected_final_rank, expected_fiber) tuples;
    expected_fiber is the constant flat-subbundle basis for the block
    family and None otherwise.
    """
    chart = Chart(("x", "y"), (0.0, 0.0), (1.0, 1.0), (17, 17))
    rng = np.random.default_rng(20260815)
    jobs = []
    for i in range(20):
        family = i % 3
        if family == 0:
            n = 2 + (i % 4) // 2
            conn, _ = random_flat_connection(chart, n, rng)
            jobs.append(("flat", conn, n, None))
        elif family == 1:
            n = 2 + (i // 3) % 3
            jobs.append(("generic", random_generic_connection(chart, n, rng), 0, None))
        else:
            k = 1 + (i // 3) % 2
            conn, fiber = random_block_connection(chart, k, rng)
            jobs.append(("block", conn, k, fiber))
    return jobs
