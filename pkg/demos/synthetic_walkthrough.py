"""Train FAMS and an ERM baseline on a synthetic population with a known Bayes predictor.

Shows the pieces end to end: data generation, both trainers, scoring on
fresh data from the population, the sufficiency-gap bound (which needs the
Bayes predictor) and the generalization bound for the fitted subgroup
posteriors. Takes about a minute on one core.

    python demos/synthetic_walkthrough.py
"""
import numpy as np

from fams.bounds import check_theorem1, corollary1_optimization_term, theorem2_bound
from fams.data import SyntheticSpec, generate_synthetic, pool
from fams.fairness_metrics import ScoredDataset, accuracy, sufficiency_gap
from fams.numerics import SeededRng
from fams.stochastic_net import MlpTopology
from fams.trainers import BilevelConfig, fit_posteriors, train

spec = SyntheticSpec(n_groups=20, samples_per_group=100)
train_sets, valid_sets, test_sets, bayes = generate_synthetic(spec, SeededRng(0))
fresh = bayes.sample(2000, SeededRng(1))   # large evaluation sample from the same population

X, y, g = pool(fresh)
bayes_scores = np.concatenate([bayes(ds.features, ds.group_id) for ds in fresh])
oracle = sufficiency_gap(ScoredDataset(bayes_scores, y, g))
print(f"Bayes predictor: gap {oracle.overall_gap:.4f}  (estimation noise floor at this sample size)\n")

topology = MlpTopology((10, 32, 16, 1))
for method, cfg in [
    ("erm", BilevelConfig(topology=topology, epochs=40, lower_lr=0.05)),
    ("fams", BilevelConfig(topology=topology, epochs=40, lam=0.01, subgroups_per_round=10)),
]:
    model = train(method, cfg, train_sets, valid_sets)
    scored = model.score(fresh)
    t1 = check_theorem1(model, fresh, bayes)
    print(f"{method:5s} accuracy {accuracy(scored.scores, scored.labels):.4f}  "
          f"gap {sufficiency_gap(scored).overall_gap:.4f}  "
          f"bound: gap {t1.theorem1_lhs:.4f} <= {t1.theorem1_rhs:.4f} (+0.03) -> {t1.theorem1_holds}")
    if method == "fams":
        posts = fit_posteriors(model.dist, train_sets, cfg)
        t2 = theorem2_bound(model.dist, posts, train_sets, test_sets, delta=0.05)
        print(f"      held-out BCE {t2.t2_test_loss:.4f} <= bound {t2.t2_bound:.4f} "
              f"(empirical {t2.t2_empirical:.4f} + KL term {t2.t2_kl_term:.4f} + confidence {t2.t2_conf_term:.4f})")
        print(f"      optimization term of the gap bound {corollary1_optimization_term(model.dist, posts):.4f}")
