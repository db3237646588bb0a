import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svgpcr import (
    AnnotatorSpec,
    TrainConfig,
    controlled_annotators,
    generate_annotations,
    make_toy_dataset,
    predict_proba,
    train,
)
from svgpcr.errors import ConfigError, InvalidInputError
from svgpcr.metrics import accuracy
from svgpcr.simulator import build_confusion


def test_reference_matrices():
    np.testing.assert_array_equal(build_confusion(AnnotatorSpec.spammer(), 10), np.full((10, 10), 0.1))
    R = build_confusion(AnnotatorSpec.reliable(0.95), 10, seed=0)
    np.testing.assert_array_equal(np.diag(R), np.full(10, 0.95))
    np.testing.assert_allclose(R.sum(0), 1.0, rtol=0, atol=1e-15)
    A = build_confusion(AnnotatorSpec.adversarial(shift=1, p=0.9), 10, seed=0)
    assert A[0, 9] == 0.9
    assert all(A[(j + 1) % 10, j] == 0.9 for j in range(10))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1), st.sampled_from(["reliable", "adversarial"]))
def test_matrices_exactly_column_stochastic(K, p, seed, kind):
    spec = AnnotatorSpec(kind, p=p, shift=int(seed % K) or 1)
    R = build_confusion(spec, K, seed)
    assert np.all(R >= 0)
    # exact up to floating-point summation order
    assert np.all(np.abs(R.sum(0) - 1.0) <= 1e-15)


@pytest.mark.parametrize("p", [0.0, -0.1, 1.2])
def test_invalid_accuracy(p):
    with pytest.raises(ConfigError):
        AnnotatorSpec.reliable(p)
    with pytest.raises(ConfigError):
        AnnotatorSpec.reliable(0.9, coverage=0.0)
    with pytest.raises(ConfigError):
        build_confusion(AnnotatorSpec.explicit(np.ones((2, 2))), 2)


def test_full_coverage_counts():
    _, y = make_toy_dataset("gaussians", 300, 3, seed=0)
    ann, mats = generate_annotations(y, controlled_annotators(), seed=1)
    assert ann.total_annotations() == 5 * 300
    assert len(mats) == 5
    for a in range(5):
        assert ann.count[ann.annotator == a].sum() == 300


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_partial_coverage_is_exact(N, coverage, seed):
    y = np.arange(N) % 3
    specs = [AnnotatorSpec.reliable(0.8, coverage=coverage), AnnotatorSpec.spammer(coverage=coverage)]
    ann, _ = generate_annotations(y, specs, seed=seed, num_classes=3)
    for a in range(2):
        assert ann.count[ann.annotator == a].sum() == round(coverage * N)
        inst = ann.instance[ann.annotator == a]
        assert len(np.unique(inst)) == len(inst)


def test_identity_annotator_copies_truth():
    y = np.random.default_rng(0).integers(0, 4, 50)
    ann, _ = generate_annotations(y, [AnnotatorSpec.explicit(np.eye(4))], seed=2, num_classes=4)
    np.testing.assert_array_equal(ann.label[np.argsort(ann.instance)], y)


def test_empirical_confusion_converges():
    N, K = 100_000, 4
    y = np.arange(N) % K
    specs = [AnnotatorSpec.reliable(0.7), AnnotatorSpec.adversarial(shift=2, p=0.6), AnnotatorSpec.spammer()]
    ann, mats = generate_annotations(y, specs, seed=7, num_classes=K)
    for a, R in enumerate(mats):
        sel = ann.annotator == a
        counts = np.zeros((K, K))
        np.add.at(counts, (ann.label[sel], y[ann.instance[sel]]), ann.count[sel])
        assert np.abs(counts / counts.sum(0) - R).max() <= 0.02


def test_generation_is_seeded():
    y = np.arange(30) % 3
    a1, m1 = generate_annotations(y, controlled_annotators(), seed=5)
    a2, m2 = generate_annotations(y, controlled_annotators(), seed=5)
    assert np.array_equal(a1.label, a2.label) and all(np.array_equal(p, q) for p, q in zip(m1, m2))
    with pytest.raises(InvalidInputError):
        generate_annotations([0, 3], controlled_annotators(), seed=0, num_classes=3)


def test_toy_datasets():
    X, y = make_toy_dataset("gaussians", 300, 3, seed=0)
    assert X.shape == (300, 2) and np.bincount(y).tolist() == [100, 100, 100]
    X2, y2 = make_toy_dataset("gaussians", 300, 3, seed=0)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    Xm, ym = make_toy_dataset("two_moons", 101, 2, seed=1)
    assert Xm.shape == (101, 2) and set(ym.tolist()) == {0, 1}
    with pytest.raises((ConfigError, InvalidInputError)):
        make_toy_dataset("spirals", 10, 2)


def test_gold_label_run_on_blobs():
    X, y = make_toy_dataset("gaussians", 500, 4, seed=3, separation=6.0)
    Xt, yt = make_toy_dataset("gaussians", 500, 4, seed=4, separation=6.0)
    model, _ = train(X, None, TrainConfig(minibatch_size=50, learning_rate=0.05, num_inducing=10, epochs=10),
                     gold_labels=y)
    assert accuracy(predict_proba(model, Xt), yt)[0] >= 0.99
