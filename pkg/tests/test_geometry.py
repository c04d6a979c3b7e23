import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from hypalign import geometry as geo
from hypalign.checks import acosh_distance, lorentz_midpoint, random_ball_points


def ball_vectors(dim=3, max_norm=0.9):
    """Hypothesis strategy for points with norm below ``max_norm`` (r=1)."""
    coords = st.lists(st.floats(-1, 1, allow_nan=False), min_size=dim, max_size=dim)
    scale = st.floats(0, max_norm)

    def build(pair):
        v, s = np.array(pair[0]), pair[1]
        n = np.linalg.norm(v)
        return v * (s / n) if n > 1e-6 else np.zeros(dim)

    return st.tuples(coords, scale).map(build)


# -- Mobius addition ---------------------------------------------------------------


def test_mobius_identity_element():
    assert_allclose(geo.mobius_add([0.0, 0.0], [0.3, 0.0]).numpy(), [0.3, 0.0], atol=0)


def test_mobius_right_inverse():
    assert_allclose(geo.mobius_add([0.5, 0.0], [-0.5, 0.0]).numpy(), [0.0, 0.0], atol=0)


def test_mobius_collinear():
    # (a + b) / (1 + r a b)
    assert_allclose(geo.mobius_add([0.5, 0.0], [0.5, 0.0]).numpy(), [0.8, 0.0], rtol=1e-15)


def test_mobius_collinear_curvature():
    a, b, r = 0.3, 0.4, 2.0
    assert_allclose(geo.mobius_add([a, 0.0], [b, 0.0], r).numpy()[0], (a + b) / (1 + r * a * b), rtol=1e-15)


def test_mobius_rejects_outside_points():
    with pytest.raises(geo.DomainError):
        geo.mobius_add([1.0, 0.0], [0.1, 0.0])
    with pytest.raises(geo.DomainError):
        geo.mobius_add([0.1, 0.0], [0.8, 0.0], r=2.0)


@settings(max_examples=200, deadline=None)
@given(ball_vectors(), ball_vectors())
def test_mobius_identities(u, v):
    zero = np.zeros_like(u)
    assert_allclose(geo.mobius_add(u, zero).numpy(), u, atol=1e-12)
    assert_allclose(geo.mobius_add(zero, v).numpy(), v, atol=1e-12)
    assert_allclose(geo.mobius_add(u, -u).numpy(), zero, atol=1e-12)
    # left cancellation
    assert_allclose(geo.mobius_add(-u, geo.mobius_add(u, v)).numpy(), v, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(ball_vectors(max_norm=0.99), ball_vectors(max_norm=0.99))
def test_mobius_stays_in_ball(u, v):
    assert float(torch.linalg.vector_norm(geo.mobius_add(u, v))) < 1


# -- conformal factor --------------------------------------------------------------


@pytest.mark.parametrize("r", [0.5, 1.0, 3.0])
def test_conformal_factor_origin(r):
    assert float(geo.conformal_factor([0.0, 0.0], r)) == 2.0


def test_conformal_factor_values():
    assert_allclose(float(geo.conformal_factor([0.5, 0.0])), 8 / 3, rtol=1e-15)
    assert float(geo.conformal_factor([0.9999, 0.0])) > 1e3


def test_conformal_factor_boundary_error():
    with pytest.raises(geo.DomainError):
        geo.conformal_factor([1.0, 0.0])


# -- exp / log maps ------------------------------------------------------------------


def test_exp_map_zero_tangent():
    out = geo.exp_map([0.0, 0.0], [0.0, 0.0])
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))
    u = torch.tensor([0.3, -0.2], dtype=torch.float64)
    assert torch.equal(geo.exp_map(u, torch.zeros(2, dtype=torch.float64)), u)


def test_exp_map_origin():
    assert_allclose(geo.exp_map([0.0, 0.0], [0.25, 0.0]).numpy(), [math.tanh(0.25), 0.0], rtol=1e-15)


def test_exp_map0_matches_exp_map_at_origin():
    v = np.array([0.3, -1.2, 0.4])
    for r in (0.5, 1.0, 2.0):
        assert_allclose(geo.exp_map0(v, r).numpy(), geo.exp_map(np.zeros(3), v, r).numpy(), rtol=1e-14)


def test_log_map_coincident_points():
    u = [0.3, 0.1]
    assert torch.equal(geo.log_map(u, u), torch.zeros(2, dtype=torch.float64))


def test_log_map_inverts_exp_example():
    w = [math.tanh(0.25), 0.0]
    assert_allclose(geo.log_map([0.0, 0.0], w).numpy(), [0.25, 0.0], rtol=1e-14)
    # the rounded value quoted for the example
    assert_allclose(geo.log_map([0.0, 0.0], [0.2449, 0.0]).numpy()[0], 0.25, rtol=1e-3)


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_exp_log_round_trip(r):
    gen = np.random.Generator(np.random.PCG64(5))
    u = torch.as_tensor(random_ball_points(gen, 1000, 4, r))
    w = torch.as_tensor(random_ball_points(gen, 1000, 4, r))
    back = geo.exp_map(u, geo.log_map(u, w, r), r)
    err = torch.linalg.vector_norm(back - w, dim=-1) / torch.linalg.vector_norm(w, dim=-1)
    assert float(err.max()) < 1e-9
    # and the other direction: log_u(exp_u(v)) = v
    v = torch.as_tensor(gen.standard_normal((4000, 4)) * 0.5)
    u4 = u.repeat(4, 1)
    w = geo.exp_map(u4, v, r)
    # the inverse property is claimed only inside the xi-shell
    inside = torch.linalg.vector_norm(w, dim=-1) <= (1 - 1e-5) / math.sqrt(r)
    assert int(inside.sum()) >= 1000
    v_back = geo.log_map(u4[inside], w[inside], r)
    err = torch.linalg.vector_norm(v_back - v[inside], dim=-1) / (torch.linalg.vector_norm(v[inside], dim=-1) + 1e-12)
    assert float(err.max()) < 1e-9


def test_exp_map_rejects_non_finite_tangent():
    with pytest.raises(geo.DomainError):
        geo.exp_map([0.0, 0.0], [math.inf, 0.0])


# -- distance --------------------------------------------------------------------------


def test_distance_examples():
    assert float(geo.riemannian_distance([0.4, 0.2], [0.4, 0.2])) == 0.0
    assert_allclose(float(geo.riemannian_distance([0.0, 0.0], [0.5, 0.0])), math.log(3), rtol=1e-14)


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_distance_dual_form(r):
    gen = np.random.Generator(np.random.PCG64(11))
    u, v = random_ball_points(gen, 1000, 5, r), random_ball_points(gen, 1000, 5, r)
    d = geo.riemannian_distance(u, v, r).numpy()
    assert_allclose(d, acosh_distance(u, v, r), rtol=1e-8)


def test_distance_from_origin_closed_form():
    # d(0, v) = (2/sqrt(r)) atanh(sqrt(r) |v|)
    for r in (0.5, 1.0, 2.0):
        v = np.array([0.1, 0.2, -0.3]) / math.sqrt(r)
        expected = 2 / math.sqrt(r) * math.atanh(math.sqrt(r) * np.linalg.norm(v))
        assert_allclose(float(geo.riemannian_distance(np.zeros(3), v, r)), expected, rtol=1e-14)


@settings(max_examples=300, deadline=None)
@given(ball_vectors(), ball_vectors(), ball_vectors())
def test_metric_axioms(u, v, w):
    d = geo.riemannian_distance
    assert float(d(u, u)) == 0.0
    assert float(d(u, v)) >= 0.0
    assert abs(float(d(u, v)) - float(d(v, u))) < 1e-10
    assert float(d(u, w)) <= float(d(u, v)) + float(d(v, w)) + 1e-9


def test_pairwise_distance_matches_rowwise():
    gen = np.random.Generator(np.random.PCG64(3))
    u = torch.as_tensor(random_ball_points(gen, 4, 3, 1.0))
    v = torch.as_tensor(random_ball_points(gen, 5, 3, 1.0))
    pw = geo.pairwise_distance(u, v, 1.0)
    assert pw.shape == (4, 5)
    for i in range(4):
        for j in range(5):
            assert_allclose(float(pw[i, j]), float(geo.riemannian_distance(u[i], v[j])), rtol=1e-14)


def test_distance_finite_near_boundary():
    u = torch.tensor([1 - 1e-9, 0.0], dtype=torch.float64)
    v = torch.tensor([-(1 - 1e-9), 0.0], dtype=torch.float64)
    d = geo.riemannian_distance(u, v)
    assert math.isfinite(float(d)) and float(d) > 30


# -- projection -------------------------------------------------------------------------


def test_project_examples():
    assert_allclose(geo.project_to_ball([0.9, 0.0], 1.0, 1e-5).numpy(), [0.9, 0.0], atol=0)
    assert_allclose(geo.project_to_ball([2.0, 0.0], 1.0, 1e-5).numpy(), [0.99999, 0.0], rtol=1e-15)
    assert_allclose(geo.project_to_ball([0.0, 3.0], 4.0, 0.0).numpy(), [0.0, 0.5], rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=3), st.sampled_from([0.5, 1.0, 2.0]))
def test_project_idempotent_and_bounded(z, r):
    p = geo.project_to_ball(z, r, 1e-5)
    assert float(torch.linalg.vector_norm(p)) <= (1 - 1e-5) / math.sqrt(r) * (1 + 1e-15)
    assert torch.equal(geo.project_to_ball(p, r, 1e-5), p)


def test_project_rejects_negative_xi():
    with pytest.raises(geo.DomainError):
        geo.project_to_ball([0.1, 0.2], 1.0, -1e-3)


@pytest.mark.parametrize("r", [0.0, -1.0, math.inf, math.nan])
def test_invalid_curvature(r):
    with pytest.raises(geo.DomainError):
        geo.conformal_factor([0.1, 0.0], r)


# -- Einstein midpoint -----------------------------------------------------------------


def test_hyp_avg_singleton():
    assert_allclose(geo.hyp_avg([[0.6, 0.0]]).numpy(), [0.6, 0.0], atol=0)


def test_hyp_avg_antipodal():
    assert_allclose(geo.hyp_avg([[0.6, 0.0], [-0.6, 0.0]]).numpy(), [0.0, 0.0], atol=1e-15)


def test_hyp_avg_orthogonal_pair_against_oracle():
    pts = np.array([[0.6, 0.0], [0.0, 0.6]])
    avg = geo.hyp_avg(pts).numpy()
    assert avg[0] == pytest.approx(avg[1], rel=1e-15)
    assert 0 < avg[0] < 0.6
    assert_allclose(avg, lorentz_midpoint(pts, 1.0), rtol=1e-8)
    # Klein route at 30 digits: k = 1.2/1.36 per point, mean k/2 per axis, back via k/(1+sqrt(1-|k|^2))
    assert_allclose(avg, [0.247644649627571829, 0.247644649627571829], rtol=1e-14)


def test_hyp_avg_empty():
    with pytest.raises(ValueError):
        geo.hyp_avg([])
    with pytest.raises(ValueError):
        geo.hyp_avg(np.zeros((0, 3)))


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_hyp_avg_matches_lorentz_oracle(r):
    gen = np.random.Generator(np.random.PCG64(2))
    for _ in range(100):
        m = int(gen.integers(1, 9))
        pts = random_ball_points(gen, m, 4, r, 0.95)
        assert_allclose(geo.hyp_avg(pts, r).numpy(), lorentz_midpoint(pts, r), rtol=1e-8, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(ball_vectors(max_norm=0.95), min_size=1, max_size=7), st.randoms(use_true_random=False))
def test_hyp_avg_permutation_and_bound(points, rnd):
    pts = np.stack(points)
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    avg = geo.hyp_avg(pts).numpy()
    assert_allclose(geo.hyp_avg(pts[perm]).numpy(), avg, atol=1e-12)
    assert np.linalg.norm(avg) <= np.linalg.norm(pts, axis=-1).max() + 1e-12


@settings(max_examples=100, deadline=None)
@given(ball_vectors(max_norm=0.95), ball_vectors(max_norm=0.95))
def test_hyp_avg_strict_norm_reduction(a, b):
    na = np.linalg.norm(a)
    if na < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    b = b / np.linalg.norm(b) * na
    if np.linalg.norm(a - b) < 1e-6:
        return
    assert np.linalg.norm(geo.hyp_avg(np.stack([a, b])).numpy()) < na


def test_hyp_avg_grouped_matches_per_group():
    gen = np.random.Generator(np.random.PCG64(8))
    pts = torch.as_tensor(random_ball_points(gen, 9, 3, 1.0))
    groups = torch.tensor([0, 1, 0, 2, 1, 0, 2, 2, 1])
    out = geo.hyp_avg_grouped(pts, groups, 3, 1.0)
    for g in range(3):
        assert_allclose(out[g].numpy(), geo.hyp_avg(pts[groups == g]).numpy(), rtol=1e-13)


# -- equal-norm distance ------------------------------------------------------------------


def test_equal_norm_distance_examples():
    assert geo.equal_norm_distance(0.7, 0.0) == 0.0
    expected = math.acosh(1 + 16 / 9)
    assert_allclose(geo.equal_norm_distance(0.5, math.pi / 2), expected, rtol=1e-14)
    # acosh(25/9) to 18 digits (mpmath)
    assert_allclose(geo.equal_norm_distance(0.5, math.pi / 2), 1.68069977242800356, rtol=1e-14)
    assert_allclose(float(geo.riemannian_distance([0.5, 0.0], [0.0, 0.5])), expected, rtol=1e-12)


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_equal_norm_distance_matches_points(r):
    gen = np.random.Generator(np.random.PCG64(1))
    for _ in range(50):
        eta = gen.uniform(0.01, 0.99) / math.sqrt(r)
        theta = gen.uniform(0.01, math.pi)
        u = [eta, 0.0]
        v = [eta * math.cos(theta), eta * math.sin(theta)]
        assert_allclose(geo.equal_norm_distance(eta, theta, r), float(geo.riemannian_distance(u, v, r)), rtol=1e-8)


def test_equal_norm_distance_small_eta():
    eta, theta = 1e-5, 1.0
    alpha = 4 * eta**2 / (1 - eta**2) ** 2
    beta = 1 - math.cos(theta)
    # acosh(1 + u) = sqrt(2u) (1 - u/12 + ...); u ~ 2e-10 here
    assert_allclose(geo.equal_norm_distance(eta, theta), math.sqrt(2 * alpha * beta), rtol=1e-10)
    # 40-digit mpmath value of acosh(1 + alpha*beta)
    assert_allclose(geo.equal_norm_distance(eta, theta), 1.917702154579196775e-05, rtol=1e-14)


def test_equal_norm_distance_boundary():
    with pytest.raises(geo.DomainError):
        geo.equal_norm_distance(1.0, 0.3)
