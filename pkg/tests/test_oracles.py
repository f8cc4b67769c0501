"""Sanity checks for the reference oracles themselves, against closed
forms and directional bounds that do not depend on the production code."""

from __future__ import annotations

import numpy as np

import oracles


def test_qp_oracle_two_point_closed_form():
    k = np.array([[1.0, -1.0], [-1.0, 1.0]])
    y = np.array([1.0, -1.0])
    alpha, obj = oracles.qp_minimum(np.outer(y, y) * k, y, c=10.0)
    assert np.allclose(alpha, [0.5, 0.5], atol=1e-12)
    assert abs(obj - (-0.5)) < 1e-12

    ridged = np.outer(y, y) * k + 0.01 * np.eye(2)
    alpha, _ = oracles.qp_minimum(ridged, y, c=10.0)
    assert np.allclose(alpha, [1.0 / 2.01, 1.0 / 2.01], atol=1e-10)


def test_qp_oracle_respects_active_box():
    # pulling C below the unconstrained optimum pins both variables at C
    k = np.array([[1.0, -1.0], [-1.0, 1.0]])
    y = np.array([1.0, -1.0])
    alpha, _ = oracles.qp_minimum(np.outer(y, y) * k, y, c=0.25)
    assert np.allclose(alpha, [0.25, 0.25], atol=1e-12)


def test_qp_oracle_never_beaten_by_feasible_points():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(2, 9))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        if np.all(y > 0) or np.all(y < 0):
            y[0] = -y[0]
        z = rng.normal(size=(n, n))
        q = np.outer(y, y) * (z @ z.T / n) + 0.01 * np.eye(n)
        c = float(rng.choice([0.5, 1.0, 10.0]))
        _, obj = oracles.qp_minimum(q, y, c)
        for _ in range(40):
            u = rng.uniform(0, c, size=n)
            sp, sn = u[y > 0].sum(), u[y < 0].sum()
            m = min(sp, sn)
            if m <= 0:
                continue
            u[y > 0] *= m / sp
            u[y < 0] *= m / sn
            value = 0.5 * float(u @ q @ u) - float(u.sum())
            assert value >= obj - 1e-9


def test_ap_oracle_hand_values():
    # relevance pattern (1, 0, 1): (1/1 + 2/3) / 2
    rel = {"a": 1, "b": 0, "c": 1}
    assert abs(oracles.ap_precision_at_k(["a", "b", "c"], rel) - 5.0 / 6.0) < 1e-12
    rel = {"a": 0, "b": 0, "c": 1}
    assert abs(oracles.ap_precision_at_k(["a", "b", "c"], rel) - 1.0 / 3.0) < 1e-12


def test_fusion_oracle_hand_values():
    # three videos, two lists with opposite orders: everything ties
    scores, fused = oracles.fusion_formula([["a", "b", "c"], ["c", "b", "a"]])
    assert all(abs(s - 1.0 / 3.0) < 1e-12 for s in scores.values())
    assert fused == ["a", "b", "c"]


def test_kde_oracle_identical_members():
    f = {"ch": np.ones((4, 3))}
    out = oracles.kde_triple_loop(f, {"ch": 1.0})
    assert np.allclose(out, 1.0)
