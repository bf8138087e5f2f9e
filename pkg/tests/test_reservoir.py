import math

import numpy as np
import pytest

from dlr import reservoir as R
from dlr.complexity import ComplexityCounter, LOOP
from dlr.errors import ConfigError, DataError, NumericError
from dlr.reservoir import (BINARY, CONCAT, PRODUCT, SUM, TANH, UNIFORM, ReservoirConfig, StateVector, combine,
                           gen_mask, reservoir_hash, run_batch, run_loop, run_split, spread)
from dlr.transforms import RealDatapoint

from oracles import reference_loop

BACKENDS = ["numpy"] + (["compiled"] if R.BACKEND == "compiled" else [])


def test_mask():
    a, b = gen_mask(7, 4, BINARY), gen_mask(7, 4, BINARY)
    np.testing.assert_array_equal(a.chips, b.chips)
    assert np.all(np.abs(a.chips) == 1)
    assert abs(gen_mask(1, 10**6).chips.mean()) < 0.005
    u = gen_mask(3, 1000, UNIFORM).chips
    assert np.all(np.abs(u) <= 1) and len(set(u)) == 1000
    with pytest.raises(ConfigError):
        gen_mask(1, 0)


def test_spread():
    np.testing.assert_array_equal(spread(2.0, np.array([1, -1, 1])), [2, -2, 2])
    np.testing.assert_array_equal(spread(0.0, gen_mask(1, 5)), np.zeros(5))
    m = gen_mask(2, 16, UNIFORM)
    np.testing.assert_array_equal(spread(0.37, m), 0.37 * m.chips)


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_input_zero_state(backend):
    for nl in ("sin", "tanh"):
        cfg = ReservoirConfig(N=8, eta=0.7, nu=0.9, nl=nl, h=(0.6, 0.4))
        x = run_loop(np.zeros(12), cfg, backend=backend).x
        np.testing.assert_array_equal(x, 0)


def test_single_sample_closed_form():
    cfg = ReservoirConfig(N=3, eta=0.3, nu=0.8)
    m = gen_mask(cfg.mask_seed, 3).chips
    np.testing.assert_allclose(run_loop([1.7], cfg).x, np.sin(0.8 * 1.7 * m), rtol=1e-15)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_tap_matches_reference(backend):
    cfg = ReservoirConfig(N=16, eta=0.5, nu=0.8, h=(0.9, 0.1))
    s = np.random.default_rng(4).normal(size=8)
    ref = reference_loop(s, gen_mask(cfg.mask_seed, 16).chips, 0.5, 0.8, (0.9, 0.1))
    assert np.max(np.abs(run_loop(s, cfg, backend=backend).x - ref)) < 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
def test_reference_sweep(backend):
    rng = np.random.default_rng(5)
    for i in range(25):
        n, ell = int(rng.integers(2, 65)), int(rng.integers(1, 33))
        h = (1.0, 0.0) if i % 2 else (float(rng.uniform(0.1, 1)), float(rng.uniform(0, 1)))
        nl = "tanh" if i % 3 == 0 else "sin"
        cfg = ReservoirConfig(N=n, eta=float(rng.uniform(0, 1.2)), nu=float(rng.uniform(0, 2)), nl=nl, h=h,
                              mask_seed=i, mask_kind=UNIFORM if i % 4 else BINARY)
        s = rng.normal(size=ell)
        ref = reference_loop(s, cfg.masks()[0].chips, cfg.eta, cfg.nu, h, math.tanh if nl == TANH else math.sin)
        assert np.max(np.abs(run_loop(s, cfg, backend=backend).x - ref)) < 1e-12


def test_backends_agree_with_noise():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    S = np.random.default_rng(6).normal(size=(7, 40))
    for prec, tol in (("float64", 1e-12), ("float32", 1e-5)):
        cfg = ReservoirConfig(N=24, eta=0.9, nu=0.5, h=(0.5, 0.5), sigma=0.05, precision=prec)
        a = run_batch(S, cfg, noise_seed=3, backend="compiled")
        b = run_batch(S, cfg, noise_seed=3, backend="numpy")
        assert np.max(np.abs(a - b)) < tol


def test_noise_is_deterministic_and_seeded():
    cfg = ReservoirConfig(N=10, eta=0.8, nu=0.5, sigma=0.1)
    s = np.linspace(-1, 1, 20)
    a, b = run_loop(s, cfg, noise_seed=4), run_loop(s, cfg, noise_seed=4)
    assert a.x.tobytes() == b.x.tobytes()
    assert not np.array_equal(a.x, run_loop(s, cfg, noise_seed=5).x)
    clean = run_loop(s, cfg.replace(sigma=0.0)).x
    assert 0 < np.std(a.x - clean) < 1.0


def test_noise_statistics():
    from dlr._fallback import normal_chips

    z = normal_chips(np.arange(4, dtype=np.uint64), np.arange(50000, dtype=np.uint64)).ravel()
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_batch_rows_match_single_runs():
    S = np.random.default_rng(7).normal(size=(5, 12))
    cfg = ReservoirConfig(N=9, eta=0.6, nu=0.4, h=(0.7, 0.3), sigma=0.01)
    X = run_batch(S, cfg, noise_seed=100)
    for b in range(5):
        np.testing.assert_array_equal(X[b], run_loop(S[b], cfg, noise_seed=100 + b).x)


def test_bounded_dynamics():
    S = 50 * np.random.default_rng(8).normal(size=(4, 30))
    cfg = ReservoirConfig(N=20, eta=3.0, nu=5.0, h=(0.8, 0.7))
    assert np.all(np.abs(run_batch(S, cfg)) <= 1.5 + 1e-12)


def test_split_loops():
    s = np.random.default_rng(9).normal(size=16)
    one = ReservoirConfig(N=6, eta=0.5, nu=0.7, h=(0.9, 0.1))
    assert np.array_equal(run_split(s, one).x, run_loop(s, one).x)
    cfg = one.replace(k=2, combiner=CONCAT)
    x = run_split(s, cfg).x
    assert x.shape == (12,)
    np.testing.assert_array_equal(x[:6], run_loop(s[:8], cfg.sub_config(0)).x)
    np.testing.assert_array_equal(x[6:], run_loop(s[8:], cfg.sub_config(1)).x)
    total = run_split(s, cfg.replace(combiner=SUM)).x
    np.testing.assert_allclose(total, x[:6] + x[6:], rtol=1e-15)
    assert cfg.replace(combiner=SUM).state_dim == 6
    with pytest.raises(ConfigError):
        run_loop(s, cfg)
    with pytest.raises(DataError):
        run_split(s[:15], cfg)


def test_split_sizes_and_seeds():
    cfg = ReservoirConfig(N=4, k=2, split_sizes=(3, 5), split_seeds=(10, 20))
    assert cfg.state_dim == 8 and cfg.sizes == (3, 5) and cfg.seeds == (10, 20)
    assert run_split(np.ones(6), cfg).x.shape == (8,)
    with pytest.raises(ConfigError):
        ReservoirConfig(N=4, k=2, split_sizes=(3, 5), combiner=SUM)
    with pytest.raises(ConfigError):
        ReservoirConfig(k=2, split_sizes=(3,))


def test_combine():
    rng = np.random.default_rng(10)
    x = rng.normal(size=5)
    assert np.array_equal(combine([x], SUM), x)
    np.testing.assert_allclose(combine([x], PRODUCT), x / np.linalg.norm(x))
    np.testing.assert_array_equal(combine([x, -x], SUM), 0)
    p = combine([rng.normal(size=50), rng.normal(size=50)], PRODUCT)
    assert abs(np.linalg.norm(p) - 1) < 1e-12
    np.testing.assert_array_equal(combine([x, x[:2]], CONCAT), np.concatenate([x, x[:2]]))
    with pytest.raises(DataError):
        combine([x, x[:2]], SUM)
    with pytest.raises(NumericError):
        combine([np.zeros(3), x[:3]], PRODUCT)
    sv = combine([StateVector(x, 7), StateVector(x, 7)], SUM)
    assert isinstance(sv, StateVector) and sv.reservoir_hash == 7


def test_config_validation():
    for bad in (dict(N=0), dict(h=(0, 0)), dict(h=(1, -1)), dict(k=0), dict(nl="relu"), dict(combiner="max"),
                dict(N=1, h=(0.5, 0.5)), dict(sigma=-1), dict(precision="float16")):
        with pytest.raises(ConfigError):
            ReservoirConfig(**bad)


def test_config_round_trip_and_hash():
    cfg = ReservoirConfig(N=50, eta=0.9, nu=0.2, h=(0.5, 0.5), k=2, combiner=SUM, mask_kind=UNIFORM, sigma=0.01)
    back = ReservoirConfig.from_dict(cfg.to_dict())
    assert back == cfg and reservoir_hash(back) == reservoir_hash(cfg)
    assert cfg.hash() != cfg.replace(eta=0.91).hash()
    assert cfg.hash() != cfg.replace(mask_seed=2).hash()
    assert 0 <= cfg.hash() < 2**64
    # stable across releases: pinned digest of the default config
    assert ReservoirConfig().hash() == 0xFBB027496368F28A


def test_state_vector_checks():
    with pytest.raises(NumericError):
        StateVector(np.array([np.inf]), 0)
    sv = run_loop(RealDatapoint(np.ones(4), label=2), ReservoirConfig(N=3))
    assert sv.label == 2 and len(sv) == 3 and sv.reservoir_hash == ReservoirConfig(N=3).hash()
    with pytest.raises(DataError):
        run_batch(np.array([[1.0, np.nan]]), ReservoirConfig(N=3))


def test_loop_multiply_count():
    c = ComplexityCounter()
    run_loop([0.5], ReservoirConfig(N=3), counter=c)
    assert c[LOOP] == 6
    c.reset()
    run_batch(np.ones((4, 10)), ReservoirConfig(N=5, h=(0.9, 0.1), sigma=0.1), counter=c)
    assert c[LOOP] == 4 * 10 * 5 * (3 + 3 + 1)


def test_threads_do_not_change_results():
    S = np.random.default_rng(11).normal(size=(16, 20))
    cfg = ReservoirConfig(N=12, eta=0.7, nu=0.5, h=(0.5, 0.5), sigma=0.02)
    np.testing.assert_array_equal(run_batch(S, cfg, threads=1), run_batch(S, cfg, threads=4))
