import numpy as np

from dlr.complexity import FIT, LOOP, PREDICT, ComplexityCounter, count, fit_multiplies, loop_multiplies
from dlr.reservoir import ReservoirConfig, run_loop
from dlr.ridge import fit_labels, predict_batch


def test_loop_count_example():
    # one sample, three nodes, a single unit tap: eta*X and nu*J per chip
    assert loop_multiplies(1, 3, (1, 0)) == 6
    assert loop_multiplies(1, 3, (0.5, 0.5)) == 18
    assert loop_multiplies(2, 3, (1, 0), sigma=0.1) == 18


def test_counter_arithmetic():
    a, b = ComplexityCounter(), ComplexityCounter()
    a.add(LOOP, 5)
    b.add(LOOP, 2)
    b.add(FIT, 7)
    c = a + b
    assert c[LOOP] == 7 and c[FIT] == 7 and c.total == 14
    assert a[LOOP] == 5
    a.merge(b)
    assert a.phases() == {LOOP: 7, FIT: 7}
    a.reset()
    assert a.total == 0
    off = ComplexityCounter(enabled=False)
    off.add(LOOP, 3)
    assert off.total == 0
    count(None, LOOP, 3)  # no counter, no error


def test_pipeline_counts():
    c = ComplexityCounter()
    cfg = ReservoirConfig(N=4, eta=0.5, nu=0.5)
    run_loop(np.ones(5), cfg, counter=c)
    assert c[LOOP] == loop_multiplies(5, 4, (1, 0))
    X = np.random.default_rng(0).normal(size=(10, 4))
    m = fit_labels(X, np.arange(10) % 2, counter=c)
    predict_batch(m, X, counter=c)
    assert c[FIT] == fit_multiplies(10, 4, 2)
    assert c[PREDICT] == 10 * 2 * 4
