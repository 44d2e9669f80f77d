import numpy as np
import pytest

from flowattack.detect import (
    NEGATIVE,
    POSITIVE,
    DetectionDataset,
    DetectorModel,
    GaussianClassStats,
    build_detection_dataset,
    detector_report,
    evaluate_detector,
    fit_class_gaussians,
    fit_gaussians_from_features,
    latent_shift,
    mahalanobis_score,
    split_mask,
    train_detector,
)
from flowattack.errors import ConditioningError, ContractError, DomainError, ShapeError


def _spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def _score_dataset(pos, neg, train_fraction=0.5, seed=0):
    scores = np.concatenate([pos, neg])[:, None]
    labels = np.concatenate([np.full(len(pos), POSITIVE), np.full(len(neg), NEGATIVE)])
    kinds = np.where(labels == POSITIVE, "clean", "adversarial")
    return DetectionDataset(scores, labels, kinds, split_mask(labels, train_fraction, seed))


# ---------- class-conditional Gaussians ----------

def test_score_at_a_class_mean_is_zero():
    stats = GaussianClassStats.from_moments(np.array([[0.0, 0.0], [3.0, 3.0]]), np.eye(2))
    assert mahalanobis_score(stats, np.array([3.0, 3.0])) == 0.0


def test_identity_covariance_gives_euclidean_distance():
    means = np.array([[0.0, 0.0], [4.0, 0.0]])
    stats = GaussianClassStats.from_moments(means, np.eye(2))
    v = np.array([[1.0, 1.0], [3.0, -2.0]])
    np.testing.assert_allclose(mahalanobis_score(stats, v), [-2.0, -5.0])


def test_squared_distance_matches_linear_solve():
    rng = np.random.default_rng(0)
    cov = _spd(rng, 3)
    means = rng.normal(size=(2, 3))
    v = rng.normal(size=(5, 3))
    stats = GaussianClassStats.from_moments(means, cov)
    expected = np.stack([np.einsum("ij,ij->i", v - m, np.linalg.solve(cov, (v - m).T).T) for m in means], axis=1)
    np.testing.assert_allclose(stats.squared_distances(v), expected, rtol=1e-5)


def test_score_is_affine_invariant():
    rng = np.random.default_rng(1)
    cov = _spd(rng, 4)
    means = rng.normal(size=(3, 4))
    v = rng.normal(size=(6, 4))
    A = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    b = rng.normal(size=4)
    before = mahalanobis_score(GaussianClassStats.from_moments(means, cov), v)
    moved = GaussianClassStats.from_moments(means @ A.T + b, A @ cov @ A.T)
    np.testing.assert_allclose(mahalanobis_score(moved, v @ A.T + b), before, rtol=1e-4)


def test_singular_and_ill_conditioned_covariances_are_rejected():
    means = np.zeros((2, 2))
    with pytest.raises(ConditioningError):
        GaussianClassStats.from_moments(means, np.zeros((2, 2)))
    with pytest.raises(ConditioningError):
        GaussianClassStats.from_moments(means, np.diag([1.0, 1e-14]))
    GaussianClassStats.from_moments(means, np.zeros((2, 2)), ridge=1e-3)


def test_fit_recovers_class_means():
    rng = np.random.default_rng(2)
    centers = np.array([[-2.0, 1.0], [3.0, 0.5]])
    labels = np.repeat([0, 1], 2000)
    feats = centers[labels] + rng.normal(0, 0.5, (4000, 2))
    stats = fit_gaussians_from_features(feats, labels)
    np.testing.assert_allclose(stats.means, centers, atol=0.05)
    np.testing.assert_allclose(stats.covariance, 0.25 * np.eye(2), atol=0.03)


def test_duplicate_class_data_gives_identical_means():
    rng = np.random.default_rng(3)
    block = rng.normal(size=(50, 3))
    stats = fit_gaussians_from_features(np.vstack([block, block]), np.repeat([0, 1], 50))
    np.testing.assert_allclose(stats.means[0], stats.means[1])


def test_fit_contracts():
    feats = np.random.default_rng(4).normal(size=(5, 2))
    with pytest.raises(DomainError):
        fit_gaussians_from_features(feats, [0, 0, 1, 1, 1], ridge=0.0)
    with pytest.raises(ContractError):
        fit_gaussians_from_features(feats, [0, 1, 1, 1, 1])
    with pytest.raises(ShapeError):
        fit_gaussians_from_features(feats, [0, 1])


def test_fit_on_classifier_features(moons, moons_classifier):
    stats = fit_class_gaussians(moons_classifier, moons.data, moons.labels, ridge=1e-4)
    assert stats.means.shape == (2, 32)
    assert stats.layer == -1
    scores = mahalanobis_score(stats, moons_classifier.features(moons.data[:10]))
    assert scores.shape == (10,) and np.all(scores <= 0)


# ---------- detector ----------

def test_perfectly_separated_scores_give_auroc_one():
    rng = np.random.default_rng(5)
    data = _score_dataset(rng.normal(5, 1, 200), rng.normal(-5, 1, 200))
    model = train_detector(data)
    metrics = evaluate_detector(model, data)
    assert metrics.auroc == 1.0
    assert metrics.accuracy >= 0.99
    assert metrics.n_eval == len(data.eval_index)


def test_shuffled_labels_give_chance_auroc():
    rng = np.random.default_rng(6)
    aurocs = []
    for seed in range(20):
        data = _score_dataset(rng.normal(size=200), rng.normal(size=200), seed=seed)
        aurocs.append(evaluate_detector(train_detector(data, seed=seed), data).auroc)
    assert abs(np.mean(aurocs) - 0.5) <= 0.05


def test_single_class_training_split_is_rejected():
    data = _score_dataset(np.arange(10.0), np.empty(0))
    with pytest.raises(ContractError):
        train_detector(data)


def test_tiny_classes_fall_back_to_fixed_ridge():
    data = _score_dataset(np.array([3.0, 4.0, 5.0, 6.0]), np.array([-3.0, -4.0, -5.0, -6.0]))
    model = train_detector(data, ridge_grid=(1e-3, 1e-2, 1e-1))
    assert model.ridge == 1e-2
    assert model.n_train == 4


def test_auroc_is_invariant_to_scaling_the_decision():
    rng = np.random.default_rng(7)
    data = _score_dataset(rng.normal(1, 1, 100), rng.normal(-1, 1, 100))
    model = train_detector(data)
    scaled = DetectorModel(model.weights * 3.0, model.bias * 3.0, model.ridge, model.n_train)
    assert evaluate_detector(scaled, data).auroc == evaluate_detector(model, data).auroc


def test_evaluation_ignores_training_rows():
    rng = np.random.default_rng(8)
    data = _score_dataset(rng.normal(1, 1, 100), rng.normal(-1, 1, 100))
    assert not set(data.train_index) & set(data.eval_index)
    model = train_detector(data)
    scores = data.scores.copy()
    scores[data.train_index] = 1e6
    tampered = DetectionDataset(scores, data.labels, data.kinds, data.train_mask)
    assert evaluate_detector(model, tampered).auroc == evaluate_detector(model, data).auroc


def test_split_mask_keeps_every_class():
    labels = np.array([1] * 30 + [0] * 3)
    mask = split_mask(labels, 0.1, seed=0)
    assert mask[labels == 0].sum() == 1
    assert mask[labels == 1].sum() == 3
    np.testing.assert_array_equal(mask, split_mask(labels, 0.1, seed=0))


def test_build_detection_dataset(moons, moons_classifier):
    stats = [fit_class_gaussians(moons_classifier, moons.data, moons.labels, layer=l, ridge=1e-4)
             for l in (0, 1)]
    clean = moons.data[:20]
    adversarial = moons.data[20:30] + 0.2
    data = build_detection_dataset(moons_classifier, stats, clean, adversarial, 0.15, moons.bounds, seed=1)
    assert data.scores.shape == (50, 2)
    assert data.balance() == {"positives": 40, "negatives": 10}
    assert list(np.unique(data.kinds)) == ["adversarial", "clean", "noisy"]
    report = detector_report("advflow", train_detector(data), evaluate_detector(train_detector(data), data), data, 1)
    assert report["attack_variant"] == "advflow" and report["negatives"] == 10


# ---------- latent shift ----------

def test_latent_shift_of_identical_inputs_is_zero(identity_flow):
    x = np.random.default_rng(9).normal(size=(8, 2))
    shift = latent_shift(identity_flow, x, x)
    np.testing.assert_array_equal(shift.ratios, np.zeros(8))
    assert shift.median == 0.0


def test_latent_shift_of_doubled_inputs_is_one(identity_flow):
    x = np.random.default_rng(10).normal(size=(8, 2))
    shift = latent_shift(identity_flow, x, 2 * x)
    np.testing.assert_allclose(shift.ratios, 1.0, rtol=1e-5)
    assert shift.counts.sum() == 8


def test_latent_shift_contracts(identity_flow):
    with pytest.raises(DomainError):
        latent_shift(identity_flow, np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        latent_shift(identity_flow, np.ones((2, 2)), np.ones((3, 2)))
    assert latent_shift(identity_flow, np.empty((0, 2)), np.empty((0, 2))).median == 0.0


def _successful(digits, results):
    pairs = [(x, r.x_adv) for r, x in zip(results, digits.x) if r.success]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_advflow_adversaries_are_harder_to_detect(digits, digits_runs, seed):
    clf = digits.classifier
    stats = [fit_class_gaussians(clf, digits.train.data, digits.train.labels, layer=l, ridge=1e-4)
             for l in (0, 1)]
    auroc = {}
    for variant, results in digits_runs.items():
        clean, adversarial = _successful(digits, results)
        data = build_detection_dataset(clf, stats, clean, adversarial, 4 / 255, (0.0, 1.0), seed=seed)
        auroc[variant] = evaluate_detector(train_detector(data, seed=seed), data).auroc
    assert auroc["advflow"] <= auroc["nattack"] - 0.05


@pytest.mark.slow
def test_advflow_adversaries_stay_closer_in_latent_space(digits, digits_runs):
    medians = {variant: latent_shift(digits.flow, *_successful(digits, results)).median
               for variant, results in digits_runs.items()}
    assert medians["advflow"] < medians["nattack"]
