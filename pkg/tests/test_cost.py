import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csrobust.certify import CertificationRecord
from csrobust.cost import (CostMatrix, UndefinedMetricError, cs_robust_error, make_task,
                           misclassification_cost, overall_robust_error, parse_cost_matrix,
                           robust_cost, target_sets)
from csrobust.numcore import Rng


def rec(i, y, bounds):
    return CertificationRecord(i, y, dict(bounds))


# -- matrices and tasks ----------------------------------------------------------------


def test_cost_matrix_invariants():
    with pytest.raises(ValueError):
        CostMatrix([[0, 1], [-1, 0]])
    with pytest.raises(ValueError):
        CostMatrix([[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        CostMatrix([[0, 1, 2], [0, 0, 1]])
    with pytest.raises(ValueError):
        CostMatrix([[0, np.inf], [0, 0]])
    C = CostMatrix([[0, 2], [0, 0]])
    assert not C.is_binary and C.sparsity == (1, 2)
    with pytest.raises(ValueError):
        C.C[0, 1] = 5


def test_single_pair_sparsity():
    C = make_task("single-pair", 10, s=0, t=2)
    assert C.sparsity == (1, 90) and C.C[0, 2] == 1 and C.is_binary


def test_small_large_entries():
    C = make_task("small-large", 10)
    assert C.C[0, 9] == 81 and C.C[9, 0] == 0 and C.sparsity == (45, 90)


def test_large_small_entries():
    C = make_task("large-small", 10)
    assert C.C[9, 0] == 81 and C.C[0, 9] == 0 and C.sparsity == (45, 90)


def test_small_large_b_entries():
    C = make_task("small-large-b", 10)
    assert C.C[2, 1] == 0.1 and C.C[1, 2] == 1 and C.C[3, 3] == 0


def test_task_sparsities():
    assert make_task("single-seed", 10, s=2).sparsity == (9, 90)
    assert make_task("single-target", 10, t=5).sparsity == (9, 90)
    assert make_task("seeds", 10, seeds=[1, 3, 5, 7, 9]).sparsity == (45, 90)
    assert make_task("seeds", 10, seeds=[0, 2, 4, 6, 8]).sparsity == (45, 90)
    assert make_task("random-pairs", 10, n=10, rng=Rng(0)).sparsity == (10, 90)
    animals, vehicles = [2, 3, 4, 5, 6, 7], [0, 1, 8, 9]
    assert make_task("cross-group", 10, sources=animals, targets=vehicles).sparsity == (24, 90)
    assert make_task("cross-group", 10, sources=vehicles, targets=animals).sparsity == (24, 90)
    C = make_task("group-real", 10)
    assert C.sparsity == (36, 90)
    assert C.C[0, 1] == 1 and C.C[0, 2] == 10 and C.C[2, 0] == 0


def test_top_pairs_picks_largest_cells():
    grid = np.zeros((4, 4))
    grid[1, 2], grid[3, 0], grid[2, 2] = 0.5, 0.4, 0.9  # diagonal ignored
    grid[0, 1] = np.nan
    C = make_task("top-pairs", 4, grid=grid, n=2)
    assert C.sparsity == (2, 12) and C.C[1, 2] == 1 and C.C[3, 0] == 1


def test_random_pairs_seeded():
    a = make_task("random-pairs", 10, n=10, rng=Rng(3))
    assert a == make_task("random-pairs", 10, n=10, rng=Rng(3))
    assert np.all(np.diag(a.C) == 0)


def test_task_errors():
    with pytest.raises(ValueError):
        make_task("single-pair", 10, s=0, t=10)
    with pytest.raises(ValueError):
        make_task("single-pair", 10, s=3, t=3)
    with pytest.raises(ValueError):
        make_task("no-such-task", 10)


# -- parsing ---------------------------------------------------------------------


def test_parse_single_pair(tmp_path):
    M = np.zeros((10, 10))
    M[0, 2] = 1
    np.savetxt(tmp_path / "c.csv", M, delimiter=",")
    assert parse_cost_matrix(tmp_path / "c.csv") == make_task("single-pair", 10, s=0, t=2)


def test_parse_nonzero_diagonal(tmp_path):
    M = np.zeros((10, 10))
    M[3, 3] = 1
    np.savetxt(tmp_path / "c.csv", M, delimiter=",")
    with pytest.raises(ValueError, match="diagonal"):
        parse_cost_matrix(tmp_path / "c.csv")


def test_parse_round_trip_with_header(tmp_path):
    C = make_task("small-large-b", 10)
    C.to_csv(tmp_path / "c.csv", header=True)
    assert parse_cost_matrix(tmp_path / "c.csv") == C


def test_parse_errors(tmp_path):
    (tmp_path / "a.csv").write_text("0,1,2\n1,0,1\n")
    with pytest.raises(ValueError, match="square"):
        parse_cost_matrix(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("0,x\n1,0\n")
    with pytest.raises(ValueError):
        parse_cost_matrix(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text("0,-1\n1,0\n")
    with pytest.raises(ValueError, match="negative"):
        parse_cost_matrix(tmp_path / "c.csv")


# -- target sets ------------------------------------------------------------------


def test_target_sets():
    ts = target_sets(CostMatrix(np.zeros((3, 3))), [0, 1, 2])
    assert not ts.delta.any() and all(o == () for o in ts.omega)
    ts = target_sets(make_task("single-pair", 10, s=0, t=2), np.repeat(np.arange(10), 10))
    assert ts.omega[0] == (2,) and ts.delta.tolist() == [True] + [False] * 9
    assert ts.counts.tolist() == [10] * 10 and ts.counts.sum() == 100
    assert ts.n_candidates == 10


# -- metrics --------------------------------------------------------------------------


def hand_records():
    # four candidates of class 0, targets 1 and 2; signs (+,+) (+,-) (-,-) (+,+)
    signs = [(1, 1), (1, -1), (-1, -1), (1, 1)]
    recs = [rec(i, 0, {1: a * 0.5, 2: b * 0.5}) for i, (a, b) in enumerate(signs)]
    recs.append(rec(4, 1, {0: -1.0, 2: -1.0}))  # non-candidate: ignored
    return recs


def test_cs_robust_error_hand():
    C = make_task("single-seed", 3, s=0)
    assert cs_robust_error(hand_records(), C) == 2 / 4


def test_cs_robust_error_all_certified():
    C = make_task("single-seed", 3, s=0)
    assert cs_robust_error([rec(0, 0, {1: 0.1, 2: 0.0})], C) == 0.0


def test_cs_robust_error_980_candidates():
    C = make_task("single-pair", 10, s=0, t=2)
    recs = [rec(i, 0, {2: -1.0 if i < 3 else 1.0}) for i in range(980)]
    assert cs_robust_error(recs, C) == 3 / 980


def test_robust_cost_hand():
    C = CostMatrix([[0, 4, 1], [0, 0, 0], [0, 0, 0]])
    recs = [rec(0, 0, {1: -0.1, 2: -0.2}), rec(1, 0, {1: 0.3, 2: 0.1})]
    assert robust_cost(recs, C) == 2.5


def test_undefined_metrics():
    C = CostMatrix(np.zeros((3, 3)))
    with pytest.raises(UndefinedMetricError):
        robust_cost([rec(0, 0, {1: -1.0})], C)
    with pytest.raises(UndefinedMetricError):
        cs_robust_error([rec(0, 0, {1: -1.0})], C)


def test_missing_target_bound():
    with pytest.raises(ValueError):
        cs_robust_error([rec(0, 0, {1: 1.0})], make_task("single-pair", 3, s=0, t=2))


def test_misclassification_cost_examples():
    C = make_task("small-large", 10)
    assert misclassification_cost([1, 2, 3], [1, 2, 3], C) == 0
    assert misclassification_cost([3, 5], [0, 5], C) == 4.5


def test_overall_robust_error():
    assert overall_robust_error(hand_records()) == 3 / 5


def brute(records, C):
    cand = [r for r in records if any(C.C[r.label] != 0)]
    fails = [[t for t in range(C.m) if C.C[r.label, t] != 0 and r.bounds[t] < 0] for r in cand]
    return sum(bool(f) for f in fails) / len(cand), sum(C.C[r.label, f].sum() for r, f in zip(cand, fails)) / len(cand)


def random_records(rng, m, n):
    y = rng.integers(0, m, size=n)
    J = rng.normal(size=(n, m))
    return [rec(i, int(y[i]), {t: float(J[i, t]) for t in range(m) if t != y[i]}) for i in range(n)]


@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_metrics_brute_force_and_scaling(seed, lam):
    rng = Rng(seed)
    m = 4
    M = rng.uniform(size=(m, m)) * (rng.uniform(size=(m, m)) < 0.4) * 5
    np.fill_diagonal(M, 0)
    M[0, 1] = max(M[0, 1], 1.0)  # at least one candidate class
    C = CostMatrix(M)
    recs = random_records(rng, m, 40)
    recs.append(rec(99, 0, {1: -1.0, 2: 0.5, 3: 0.5}))
    e, c = brute(recs, C)
    assert cs_robust_error(recs, C) == e
    assert robust_cost(recs, C) == pytest.approx(c, rel=1e-12)
    assert cs_robust_error(recs, C.scaled(lam)) == e
    assert robust_cost(recs, C.scaled(lam)) == pytest.approx(lam * c, rel=1e-12)


@given(st.integers(0, 10**6))
def test_binary_robust_cost_sandwich(seed):
    rng = Rng(seed)
    m = 5
    M = (rng.uniform(size=(m, m)) < 0.3).astype(float)
    np.fill_diagonal(M, 0)
    M[1, 0] = 1
    C = CostMatrix(M)
    recs = random_records(rng, m, 30) + [rec(99, 1, {t: 1.0 for t in range(m) if t != 1})]
    e, cost = cs_robust_error(recs, C), robust_cost(recs, C)
    widest = max(len(C.omega(j)) for j in range(m))
    assert e <= cost + 1e-15 and cost <= widest * e + 1e-15


@given(st.integers(0, 10**6))
def test_binary_misclassification_cost_is_error_rate(seed):
    rng = Rng(seed)
    C = CostMatrix(1 - np.eye(6))
    pred, lab = rng.integers(0, 6, size=50), rng.integers(0, 6, size=50)
    assert misclassification_cost(pred, lab, C) == np.mean(pred != lab)


def test_all_ones_cs_error_equals_overall():
    rng = Rng(1)
    recs = random_records(rng, 4, 60)
    assert cs_robust_error(recs, CostMatrix(1 - np.eye(4))) == overall_robust_error(recs)
