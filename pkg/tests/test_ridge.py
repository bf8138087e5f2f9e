import numpy as np
import pytest

from dlr.complexity import FIT, ComplexityCounter, fit_multiplies
from dlr.errors import ConfigError, DataError, FormatError, NumericError
from dlr.ridge import (LambdaSweep, WeightModel, accuracy, fit_labels, fit_rr, grid_search, one_hot, predict,
                       predict_batch, wire_size)

from oracles import gd_ridge


@pytest.fixture
def problem():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 20))
    y = rng.integers(0, 4, 50)
    return X, y, one_hot(y, range(4))


def test_matches_gradient_descent(problem):
    X, _, Y = problem
    lam = 0.5
    m = fit_rr(X, Y, lam)
    assert np.abs(m.W_out - gd_ridge(X, Y, lam)).max() < 1e-6


def test_normal_equation_residual(problem):
    X, _, Y = problem
    for lam in (1e-6, 1e-2, 10.0):
        W = fit_rr(X, Y, lam).W_out.T
        r = (X.T @ X + lam * np.eye(20)) @ W - X.T @ Y
        assert np.abs(r).max() < 1e-8


def test_weight_norm_shrinks_with_lambda(problem):
    X, _, Y = problem
    norms = [np.linalg.norm(fit_rr(X, Y, lam).W_out) for lam in (1e-4, 1e-2, 1, 100)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_singular_without_lambda():
    X = np.ones((5, 3))
    with pytest.raises(NumericError):
        fit_rr(X, np.eye(5)[:, :2], 0.0)


def test_bad_inputs(problem):
    X, _, Y = problem
    with pytest.raises(ConfigError):
        fit_rr(X, Y, -1.0)
    with pytest.raises(DataError):
        fit_rr(X, Y[:10])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError):
        fit_rr(bad, Y)
    with pytest.raises(DataError):
        one_hot(np.array([9]), (0, 1))


def test_fit_labels_order(problem):
    X, y, _ = problem
    m = fit_labels(X, y + 10, 1e-2)
    assert m.labels == (10, 11, 12, 13)
    assert m.trained_on == 50
    assert accuracy(m, X, y + 10) > 0.5


def test_predict_tie_goes_low():
    m = WeightModel(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), (5, 6, 7))
    label, scores = predict(m, np.array([1.0, 0.0]))
    assert label == 5 and scores[0] == scores[1]


def test_reservoir_hash_checked(problem):
    X, y, _ = problem
    m = fit_labels(X, y, reservoir_hash=42)
    predict_batch(m, X, reservoir_hash=42)
    with pytest.raises(DataError):
        predict_batch(m, X, reservoir_hash=43)
    with pytest.raises(DataError):
        predict(m, X[0, :5])


def test_round_trip(tmp_path, problem):
    X, y, _ = problem
    m = fit_labels(X, y, 0.25, reservoir_hash=0xABCDEF)
    p = tmp_path / "w.dlrw"
    m.save(p)
    assert p.stat().st_size == wire_size(m.Q, m.N)
    back = WeightModel.load(p)
    assert back.labels == m.labels and back.lam == 0.25 and back.reservoir_hash == 0xABCDEF
    np.testing.assert_allclose(back.W_out, m.W_out, rtol=1e-6, atol=1e-7)
    assert back.to_bytes() == m.to_bytes()


def test_corrupt_weights(problem):
    X, y, _ = problem
    raw = fit_labels(X, y).to_bytes()
    with pytest.raises(FormatError):
        WeightModel.from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        WeightModel.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        WeightModel.from_bytes(raw[:10])


def test_model_validation():
    with pytest.raises(DataError):
        WeightModel(np.zeros((2, 3)), (1, 1))
    with pytest.raises(DataError):
        WeightModel(np.zeros((1, 3)), (1,))
    with pytest.raises(NumericError):
        WeightModel(np.full((2, 3), np.inf), (0, 1))


def test_sweep_matches_direct(problem):
    X, y, _ = problem
    sweep = LambdaSweep(X, y)
    for lam in (1e-3, 1.0):
        np.testing.assert_allclose(sweep.fit(lam).W_out, fit_labels(X, y, lam).W_out, atol=1e-10)
    accs = sweep.accuracies([1e-3, 1.0], X, y)
    assert len(accs) == 2 and all(0 <= a <= 1 for a in accs)


def test_fit_count():
    c = ComplexityCounter()
    fit_rr(np.random.default_rng(0).normal(size=(40, 12)), np.eye(40)[:, :3], 1e-2, counter=c)
    assert c[FIT] == fit_multiplies(40, 12, 3)
    # split loops shrink the dominant B N^2 term by k^2
    big, half = fit_multiplies(12000, 600, 20), fit_multiplies(12000, 300, 20)
    assert half / big < 0.30


def test_grid_search_refines():
    calls = []

    def evaluate(p):
        calls.append(dict(p))
        return 1.0 - (np.log10(p["lam"]) + 2.5) ** 2 / 100 - abs(p["eta"] - 0.6) / 10

    res = grid_search({"lam": [1e-4, 1e-2, 1], "eta": [0.2, 0.5, 0.8]}, evaluate)
    assert len(res.table) > 9
    assert res.best["lam"] == pytest.approx(1e-3) or res.best["lam"] == pytest.approx(1e-2)
    assert res.best["eta"] in (0.5, 0.65)
    assert res.accuracy == max(a for _, a in res.table)


def test_grid_tie_prefers_cheaper():
    res = grid_search({"N": [400, 200], "k": [1, 2]}, lambda p: 0.9, refine=False)
    assert res.best == {"N": 200, "k": 2}


def test_grid_empty():
    with pytest.raises(ConfigError):
        grid_search({"N": []}, lambda p: 0.0)
