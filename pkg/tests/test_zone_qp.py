import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmesh.rotations import rotation_matrix
from diffmesh.zone_qp import solve_inequality_qp, solve_zone

from zone_utils import enumeration_oracle, node_zone, rigid_zone


def test_feasible_input_is_fixed_point():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(2, 3))
    q = rng.normal(size=3)
    h = -(g @ q) - 1.0  # strictly feasible at q
    zone = node_zone(g, h, 1)
    sol = solve_zone(zone, q, np.eye(3))
    assert np.allclose(sol.z_star, q)
    assert np.abs(sol.lambda_star).max() == 0.0
    assert len(sol.active_set) == 0


def test_single_halfspace_projection_closed_form():
    n = np.array([0.0, 0.0, 1.0])
    c = -0.25                      # constraint n.x + c <= 0, violated at q
    q = np.array([0.3, -0.2, 0.5])
    zone = node_zone(n[None, :], np.array([c]), 1)
    sol = solve_zone(zone, q, np.eye(3))
    expected = q - (n @ q + c) * n
    assert np.abs(sol.z_star - expected).max() < 1e-12
    assert abs(sol.lambda_star[0] - (n @ q + c)) < 1e-12


def test_two_equal_nodes_split_correction_and_conserve_momentum():
    # gap n.(x_b - x_a) >= 0.1 encoded as G x + h <= 0
    n = np.array([1.0, 0.0, 0.0])
    g = np.concatenate([n, -n])[None, :]
    h = np.array([0.1])
    q = np.array([0.0, 0.0, 0.0, 0.03, 0.0, 0.0])  # gap 0.03 < 0.1
    zone = node_zone(g, h, 2)
    sol = solve_zone(zone, q, np.eye(6))
    da = sol.z_star[:3] - q[:3]
    db = sol.z_star[3:] - q[3:]
    assert np.allclose(da, -db, atol=1e-12)
    assert abs((sol.z_star[3] - sol.z_star[0]) - 0.1) < 1e-10
    assert np.abs(da + db).max() < 1e-12  # equal masses: momentum unchanged


def test_matches_enumeration_oracle_small_instances():
    rng = np.random.default_rng(1)
    for trial in range(200):
        n_nodes = 1
        n = 3
        m = rng.integers(1, 4)
        mhat = np.diag(rng.uniform(0.5, 3.0, size=n))
        g = rng.normal(size=(m, n))
        z_feas = rng.normal(size=n)
        h = -(g @ z_feas) - rng.uniform(0.05, 0.5, size=m)
        q = rng.normal(size=n)
        zone = node_zone(g, h, n_nodes)
        sol = solve_zone(zone, q, mhat)
        oracle = enumeration_oracle(mhat, q, g, -h)
        assert oracle is not None
        assert np.abs(sol.z_star - oracle[1]).max() < 1e-9
        assert np.abs(sol.lambda_star - oracle[2]).max() < 1e-8


def test_kkt_residuals_on_random_zones():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n_nodes = rng.integers(1, 5)
        n = 3 * n_nodes
        m = rng.integers(1, 2 * n_nodes + 1)
        mhat = np.diag(rng.uniform(0.5, 3.0, size=n))
        g = rng.normal(size=(m, n))
        z_feas = rng.normal(size=n)
        h = -(g @ z_feas) - rng.uniform(0.05, 0.5, size=m)
        q = rng.normal(size=n)
        zone = node_zone(g, h, n_nodes)
        sol = solve_zone(zone, q, mhat)
        stat, comp, feas = sol.kkt_residuals()
        scale = max(1.0, np.linalg.norm(mhat @ q))
        assert stat <= 1e-8 * scale
        assert comp <= 1e-8 * max(1.0, np.abs(sol.lambda_star).max(initial=0.0))
        assert feas <= 1e-9
        assert sol.lambda_star.min(initial=0.0) >= 0.0


@given(st.floats(min_value=0.01, max_value=100.0))
@settings(max_examples=40, deadline=None)
def test_mass_scaling_leaves_optimum_scales_multipliers(c):
    rng = np.random.default_rng(5)
    g = rng.normal(size=(2, 6))
    z_feas = rng.normal(size=6)
    h = -(g @ z_feas) - np.array([0.1, 0.2])
    q = rng.normal(size=6)
    mhat = np.diag(rng.uniform(0.5, 2.0, size=6))
    zone = node_zone(g, h, 2)
    base = solve_zone(zone, q, mhat)
    scaled = solve_zone(zone, q, c * mhat)
    assert np.abs(base.z_star - scaled.z_star).max() < 1e-8
    assert np.abs(c * base.lambda_star - scaled.lambda_star).max() < 1e-8 * max(1.0, c)


def test_rigid_zone_nonlinear_constraints_converge():
    # cube corner vertices pushed below a plane; constraints are nonlinear in
    # the rotation, so the SQP loop must iterate and end feasible.
    p_rest = np.array([[0.5, 0.5, -0.5], [-0.5, 0.5, -0.5],
                       [0.5, -0.5, -0.5], [-0.5, -0.5, -0.5]])
    ref = rotation_matrix((0.05, -0.03, 0.1))
    n = np.array([0.0, 0.0, 1.0])
    g = np.zeros((4, 12))
    for r in range(4):
        g[r, 3 * r:3 * r + 3] = -n
    h = np.full(4, 0.001 + 0.0)   # require z >= 0.001 for each vertex
    zone = rigid_zone(p_rest, ref, g, h)
    mhat = np.zeros((6, 6))
    mhat[:3, :3] = np.eye(3) * 0.4
    mhat[3:, 3:] = np.eye(3) * 2.0
    q = np.array([0.02, -0.01, 0.03, 0.0, 0.0, 0.44])  # corners dip below
    sol = solve_zone(zone, q, mhat)
    assert sol.converged
    assert sol.c_star.max() <= 1e-9
    stat, comp, _ = sol.kkt_residuals()
    assert stat <= 1e-8 * max(1.0, np.linalg.norm(mhat @ q))
    assert comp <= 1e-8


def test_warm_start_changes_nothing():
    rng = np.random.default_rng(9)
    g = rng.normal(size=(4, 6))
    z_feas = rng.normal(size=6)
    h = -(g @ z_feas) - rng.uniform(0.05, 0.3, size=4)
    q = rng.normal(size=6)
    mhat = np.eye(6)
    x1, l1, a1, ok1 = solve_inequality_qp(mhat, q, g, h)
    x2, l2, a2, ok2 = solve_inequality_qp(mhat, q, g, h, warm_start=a1)
    assert ok1 and ok2
    assert np.abs(x1 - x2).max() < 1e-12
    assert np.abs(l1 - l2).max() < 1e-12


def test_infeasible_linearization_reports_relaxation():
    # contradictory constraints: x >= 1 and x <= -1 on the same coordinate
    g = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    h = np.array([1.0, 1.0])
    zone = node_zone(g, h, 1)
    sol = solve_zone(zone, np.zeros(3), np.eye(3))
    assert sol.relaxed
    assert not sol.converged or sol.relaxed
