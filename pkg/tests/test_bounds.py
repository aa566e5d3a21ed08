import json
import math

import numpy as np
import pytest

from fams.bounds import (
    BCE_BOUND,
    BoundReport,
    MissingOracleError,
    check_theorem1,
    corollary1_optimization_term,
    lambda_sweep,
    sweep_to_csv,
    theorem2_bound,
    theorem2_terms,
)
from fams.data import LogisticBayes, SyntheticSpec, generate_synthetic
from fams.errors import DataError
from fams.numerics import SeededRng
from fams.stochastic_net import GaussianWeightDist, MlpTopology, init_dist, kl_divergence, softplus_inv
from fams.trainers import BilevelConfig

from oracles import gaussian_kl

TOPO = MlpTopology((3, 4, 1))


def perturbed(q, rng, scale=0.1):
    return GaussianWeightDist(q.topology, q.theta + scale * rng.normal(q.n_params),
                              softplus_inv(q.sigma * np.exp(scale * rng.normal(q.n_params))))


@pytest.fixture(scope="module")
def small_synthetic():
    return generate_synthetic(SyntheticSpec(n_groups=3, input_dim=3, samples_per_group=40), SeededRng(0))


# --------------------------------------------------------- sufficiency-gap bound

def test_bayes_predictor_has_zero_rhs_and_small_gap():
    *_, bayes = generate_synthetic(SyntheticSpec(n_groups=4), SeededRng(0))
    fresh = bayes.sample(20_000, SeededRng(1))
    rep = check_theorem1(bayes, fresh, bayes)
    assert rep.theorem1_rhs == 0.0
    assert rep.theorem1_lhs <= 0.02
    assert rep.theorem1_holds


def test_constant_predictor_on_shifted_base_rates():
    # group label means 0.8 and 0.2 with features irrelevant: lhs -> 0.3, rhs = 4 * 0.3 exactly
    bayes = LogisticBayes(np.zeros((2, 3)), np.array([math.log(4.0), -math.log(4.0)]))
    fresh = bayes.sample(50_000, SeededRng(2))
    rep = check_theorem1(lambda x, a: np.full(len(x), 0.5), fresh, bayes)
    assert rep.theorem1_lhs == pytest.approx(0.3, abs=0.01)
    assert rep.theorem1_rhs == pytest.approx(1.2, abs=1e-12)
    assert rep.theorem1_holds


def test_theorem1_accepts_distributions_and_predictors(small_synthetic):
    tr, _, te, bayes = small_synthetic
    q = init_dist(TOPO, SeededRng(0), 0.3)
    rep = check_theorem1(q, te, bayes, rng=SeededRng(4))
    assert rep.n_groups == 3 and rep.theorem1_holds is not None
    with pytest.raises(TypeError):
        check_theorem1(42, te, bayes)


def test_theorem1_requires_oracle_and_groups(small_synthetic):
    te, bayes = small_synthetic[2], small_synthetic[3]
    with pytest.raises(MissingOracleError):
        check_theorem1(bayes, te, None)
    with pytest.raises(DataError):
        check_theorem1(bayes, te[:1], bayes)


# ----------------------------------------------------------- optimization term

def test_optimization_term_zero_when_posteriors_equal_prior():
    q = init_dist(TOPO, SeededRng(0), 0.2)
    assert corollary1_optimization_term(q, [q.copy(), q.copy()]) == 0.0


def test_optimization_term_single_group_kl_two():
    # shift one mean coordinate so that KL = (delta / sigma)^2 / 2 = 2
    q = init_dist(TOPO, SeededRng(0), 0.2)
    qa = q.copy()
    qa.theta[0] += 2.0 * q.sigma[0]
    assert kl_divergence(qa, q) == pytest.approx(2.0, rel=1e-12)
    assert corollary1_optimization_term(q, [qa]) == pytest.approx(4.0, rel=1e-12)


def test_optimization_term_matches_direct_formula():
    r = SeededRng(3)
    q = init_dist(TOPO, r.child(0), 0.2)
    posts = {i: perturbed(q, r.child(1, i)) for i in range(5)}
    want = 2 * math.sqrt(2) / 5 * sum(
        math.sqrt(gaussian_kl(p.theta, p.sigma, q.theta, q.sigma)) for p in posts.values())
    assert corollary1_optimization_term(q, posts) == pytest.approx(want, rel=0, abs=1e-12)


def test_optimization_term_rejects_topology_mismatch():
    q = init_dist(TOPO, SeededRng(0), 0.2)
    with pytest.raises(Exception):
        corollary1_optimization_term(q, [init_dist(MlpTopology((3, 5, 1)), SeededRng(0), 0.2)])
    with pytest.raises(ValueError):
        corollary1_optimization_term(q, [])


# -------------------------------------------------------- generalization bound

def test_terms_formula():
    emp, kl, conf = theorem2_terms(0.3, [1.0, 4.0], 8, 2.0, 0.05)
    assert emp == 0.3
    assert kl == pytest.approx(2.0 / 4.0 * 3.0, rel=1e-15)
    assert conf == pytest.approx(2.0 * math.sqrt(math.log(20.0) / 16), rel=1e-15)


def test_confidence_term_vanishes_as_delta_goes_to_one():
    assert theorem2_terms(0.0, [1.0], 10, 1.0, 1 - 1e-12)[2] <= 1e-5


def test_doubling_m_divides_terms_by_root_two():
    a = theorem2_terms(0.1, [0.3, 0.7, 1.1], 50, 5.0, 0.05)
    b = theorem2_terms(0.1, [0.3, 0.7, 1.1], 100, 5.0, 0.05)
    assert a[1] / b[1] == pytest.approx(math.sqrt(2), abs=1e-9)
    assert a[2] / b[2] == pytest.approx(math.sqrt(2), abs=1e-9)


@pytest.mark.parametrize("args", [(0.1, [1.0], 10, 0.0, 0.05), (0.1, [1.0], 10, 1.0, 1.0),
                                  (0.1, [1.0], 0, 1.0, 0.5), (0.1, [], 10, 1.0, 0.5)])
def test_terms_validation(args):
    with pytest.raises(ValueError):
        theorem2_terms(*args)


def test_bound_with_posteriors_equal_prior(small_synthetic):
    tr, _, te, _ = small_synthetic
    q = init_dist(TOPO, SeededRng(0), 0.2)
    rep = theorem2_bound(q, [q, q, q], tr, te, L=5.0, delta=0.05)
    assert rep.t2_kl_term == 0.0
    assert rep.t2_bound == pytest.approx(rep.t2_empirical + 5.0 * math.sqrt(math.log(20) / (3 * 40)), rel=1e-12)
    assert rep.m == 40 and rep.n_groups == 3
    assert rep.L_consistent is False
    assert rep.t2_test_loss <= 5.0


def test_default_L_is_clamp_bound(small_synthetic):
    tr, _, te, _ = small_synthetic
    q = init_dist(TOPO, SeededRng(0), 0.2)
    rep = theorem2_bound(q, [q] * 3, tr, None)
    assert rep.L == pytest.approx(-math.log(1e-7)) == BCE_BOUND
    assert rep.L_consistent is True and rep.t2_test_loss is None and rep.t2_holds is None


def test_unequal_sizes_truncate_or_fail(small_synthetic):
    tr, _, te, _ = small_synthetic
    q = init_dist(TOPO, SeededRng(0), 0.2)
    uneven = [tr[0], tr[1].subset(slice(0, 25)), tr[2]]
    assert theorem2_bound(q, [q] * 3, uneven, te).m == 25
    with pytest.raises(DataError):
        theorem2_bound(q, [q] * 3, uneven, te, truncate=False)


def test_bound_is_deterministic(small_synthetic):
    tr, _, te, _ = small_synthetic
    q = init_dist(TOPO, SeededRng(0), 0.2)
    posts = [perturbed(q, SeededRng(i)) for i in range(3)]
    a = theorem2_bound(q, posts, tr, te, rng=SeededRng(7))
    b = theorem2_bound(q, posts, tr, te, rng=SeededRng(7))
    assert a.to_json() == b.to_json()


# ------------------------------------------------------------------- report

def test_report_merge_and_json():
    a = BoundReport(theorem1_lhs=0.1, n_groups=3)
    b = BoundReport(t2_bound=2.0, n_groups=4)
    m = a.merge(b)
    assert m.theorem1_lhs == 0.1 and m.t2_bound == 2.0 and m.n_groups == 4
    assert json.loads(m.to_json())["t2_bound"] == 2.0


# -------------------------------------------------------------------- sweep

def test_sweep_rows_and_csv(small_synthetic):
    tr, va, te, _ = small_synthetic
    cfg = BilevelConfig(topology=TOPO, epochs=2, subgroups_per_round=2, lower_steps=3, upper_steps=3)
    rows = lambda_sweep(cfg, [0.01, 0.4, 50], tr, va, te, seeds=[0, 1])
    assert [r.lam for r in rows] == [0.01, 0.4, 50.0]
    assert all(r.seeds == (0, 1) for r in rows)
    lines = sweep_to_csv(rows).splitlines()
    assert lines[0] == "lambda,acc_mean,acc_std,gap_mean,gap_std,seeds"
    assert len(lines) == 4 and lines[1].endswith(",0 1")
    with pytest.raises(ValueError):
        lambda_sweep(cfg, [0.1, 1.0], tr, va, te)
