import numpy as np
import pytest

from flowattack.errors import DomainError, ShapeError
from flowattack.threat import is_feasible, linf_distance, project_linf


def test_feasible_candidate_is_unchanged():
    x = np.array([0.5, 0.5])
    np.testing.assert_array_equal(project_linf(np.array([0.52, 0.49]), x, 0.05), [0.52, 0.49])


def test_far_candidate_is_clipped_to_the_ball():
    x = np.array([0.5, 0.5])
    np.testing.assert_allclose(project_linf(np.array([0.6, 0.4]), x, 0.05), [0.55, 0.45])


def test_zero_epsilon_returns_the_clipped_anchor():
    x = np.array([0.2, 1.3])
    np.testing.assert_array_equal(project_linf(np.zeros(2), x, 0.0), [0.2, 1.0])


def test_projection_is_exact_and_idempotent():
    rng = np.random.default_rng(0)
    eps = 8 / 255
    anchor = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    cand = anchor + rng.normal(0, 0.2, (50, 8, 8))
    out = project_linf(cand, anchor, eps)
    assert out.shape == cand.shape
    assert np.all(np.abs(out - anchor.astype(np.float64)) <= eps)
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_array_equal(project_linf(out, anchor, eps), out)


def test_projection_contracts():
    with pytest.raises(ShapeError):
        project_linf(np.zeros(3), np.zeros(2), 0.1)
    with pytest.raises(DomainError):
        project_linf(np.zeros(2), np.zeros(2), -0.1)


def test_feasibility_helpers():
    x = np.array([0.0, 1.0])
    assert linf_distance(x + 0.1, x) == pytest.approx(0.1)
    assert is_feasible(np.array([0.05, 0.95]), x, 0.1, (0.0, 1.0))
    assert not is_feasible(np.array([0.05, 1.05]), x, 0.1, (0.0, 1.0))
