from itertools import combinations

import numpy as np
import pytest
import torch

from svgpcr import AnnotationSet, LabelPosterior
from svgpcr.errors import DataError, NumericalError
from svgpcr.sparse_gp import gaussian_kl
from svgpcr.trainer import TERMS, SVGPCR, elbo_minibatch, gradients

from oracles import brute_force_elbo
from toy import gradient_error, random_toy


@pytest.mark.parametrize("seed", range(4))
def test_full_batch_matches_brute_force(seed):
    t = random_toy(seed, N=5, K=2, M=2, A=2)
    bd = elbo_minibatch(t.model, t.X, t.ann, np.arange(5), refresh=False)
    assert bd.scale == 1.0
    ref = brute_force_elbo(**t.oracle_args())
    got = bd.as_floats()
    for name in TERMS + ("total",):
        assert got[name] == pytest.approx(ref[name], abs=1e-10), name


def test_refreshed_q_matches_brute_force_and_is_optimal():
    t = random_toy(7, N=6, K=3, M=2, A=3)
    batch = np.arange(6)
    bd = elbo_minibatch(t.model, t.X, t.ann, batch, refresh=True)
    q = t.model.labels.q.numpy()
    assert float(bd.total) == pytest.approx(brute_force_elbo(**t.oracle_args(q))["total"], abs=1e-10)
    # the closed-form rows maximize the bound over q: any perturbation lowers it
    rng = np.random.default_rng(0)
    for _ in range(5):
        other = 0.9 * q + 0.1 * rng.dirichlet(np.ones(3), size=6)
        assert brute_force_elbo(**t.oracle_args(other))["total"] < float(bd.total)


def test_minibatch_terms_match_brute_force():
    t = random_toy(2, N=6, K=2, M=2, A=2)
    batch = [1, 3, 4]
    got = elbo_minibatch(t.model, t.X, t.ann, batch, refresh=False)
    ref = brute_force_elbo(**t.oracle_args(), batch=batch)
    assert got.scale == 2.0
    assert float(got.total) == pytest.approx(ref["total"], abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_minibatch_estimator_unbiased(seed):
    t = random_toy(seed, N=6, K=2, M=2, A=2)
    full = float(elbo_minibatch(t.model, t.X, t.ann, np.arange(6), refresh=False).total)
    values = [float(elbo_minibatch(t.model, t.X, t.ann, list(b), refresh=False).total)
              for b in combinations(range(6), 3)]
    assert len(values) == 20
    assert np.mean(values) == pytest.approx(full, abs=1e-9)


def test_no_annotations_reduces_to_svgp_structure():
    t = random_toy(1, N=5, K=3, M=2, A=2)
    empty = AnnotationSet.from_triples([], [], [], num_classes=3, num_instances=5, annotator_ids=[0, 1])
    t.model.labels = LabelPosterior.uniform(5, 3)
    bd = elbo_minibatch(t.model, t.X, empty, np.arange(5), refresh=False)
    assert float(bd.annotation_term) == 0.0
    assert float(bd.total) == pytest.approx(
        float(bd.likelihood_term + bd.entropy_term - bd.gaussian_kl - bd.dirichlet_kl), abs=1e-12)


def test_gold_label_mode_has_no_crowd_terms():
    t = random_toy(1, N=5, K=2)
    gold = SVGPCR(t.model.gp, None, LabelPosterior.one_hot([0, 1, 1, 0, 1], 2), t.model.likelihood)
    bd = elbo_minibatch(gold, t.X, None, np.arange(5))
    assert float(bd.annotation_term) == float(bd.dirichlet_kl) == float(bd.entropy_term) == 0.0
    assert float(bd.total) == pytest.approx(float(bd.likelihood_term - gaussian_kl(gold.gp)), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_all_groups(seed):
    t = random_toy(100 + seed, N=6, K=3, M=3, A=2)
    batch = [0, 2, 3, 5]
    for name in t.model.parameters():
        assert gradient_error(t.model, t.X, t.ann, batch, name) <= 1e-3, name


def test_annotation_gradient_small_case():
    t = random_toy(5, N=3, K=2, M=2, A=1)
    assert gradient_error(t.model, t.X, t.ann, np.arange(3), "raw_alpha") <= 1e-4


def test_inducing_input_gradient_one_dimensional():
    t = random_toy(6, N=4, K=2, M=2, A=2, D=1)
    assert gradient_error(t.model, t.X, t.ann, np.arange(4), "inducing_inputs") <= 1e-4


def test_gradients_leave_requires_grad_flags():
    t = random_toy(0)
    g = gradients(t.model, t.X, t.ann, [0, 1])
    assert set(g) == set(t.model.parameters())
    assert not any(p.requires_grad for p in t.model.parameters().values())


def test_validation_and_non_finite_terms():
    t = random_toy(0)
    with pytest.raises(DataError):
        elbo_minibatch(t.model, t.X, t.ann, [])
    with pytest.raises(DataError):
        elbo_minibatch(t.model, t.X[:4], t.ann, [0])
    with torch.no_grad():
        t.model.gp.means[0, 0] = float("nan")
    with pytest.raises(NumericalError, match="likelihood_term|gaussian_kl"):
        elbo_minibatch(t.model, t.X, t.ann, [0, 1], refresh=False)
