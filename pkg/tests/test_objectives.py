"""Tests for objectives module."""

import math

import numpy as np
import pytest
import torch

from stagedpgd.core.objectives import (
    SMOOTHING_FLOOR,
    ClipKLObjective,
    ObjectiveError,
    PredictionDistribution,
    TextBank,
    clip_distribution,
    clip_kl_objective,
    distribution_from_similarities,
    gradient_conflict_report,
    gradient_cosine,
    joint_objective,
    kl_divergence,
    smoothed_softmax,
    task_objective,
    task_target,
)
from stagedpgd.core.dataset import generate_dataset
from stagedpgd.core.perturb import clamp_valid

from .conftest import make_model, tiny_spec

EPS = 8 / 255
FD_STEP = 1e-4


@pytest.fixture(scope="module")
def gradcheck_samples():
    """Ten test samples for the finite-difference checks."""
    return generate_dataset(tiny_spec(test_size=10)).test


def _perturbed(sample, seed=0):
    rng = np.random.default_rng(seed)
    x = sample.image
    return clamp_valid(x + rng.uniform(-EPS, EPS, size=x.shape))


def _check_gradient(fn, image, grad, seed, coordinates=20):
    """Central differences on random coordinates carrying a visible share of the gradient."""
    rng = np.random.default_rng(seed)
    flat = np.abs(grad).ravel()
    candidates = np.flatnonzero(flat > 1e-2 * flat.max())
    chosen = rng.choice(candidates, size=min(coordinates, candidates.size), replace=False)

    for index in chosen:
        pos = np.unravel_index(index, image.shape)
        plus, minus = image.copy(), image.copy()
        plus[pos] += FD_STEP
        minus[pos] -= FD_STEP
        numeric = (fn(plus)[0] - fn(minus)[0]) / (2 * FD_STEP)
        analytic = grad[pos]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic))
        assert rel < 1e-3, f"coordinate {pos}: analytic {analytic}, numeric {numeric}"


def test_text_bank_rejects_duplicates():
    """Test captions must be unique."""
    emb = np.eye(2)
    with pytest.raises(ObjectiveError, match="unique"):
        TextBank(("a red circle", "a red circle"), emb)


def test_text_bank_rejects_non_unit_rows():
    """Test embeddings must be normalized."""
    with pytest.raises(ObjectiveError, match="unit norm"):
        TextBank(("a red circle", "a blue square"), 2 * np.eye(2))


def test_text_bank_rejects_empty():
    """Test an empty bank is an error."""
    with pytest.raises(ObjectiveError, match="empty"):
        TextBank((), np.zeros((0, 4)))


def test_text_bank_lookup(bank, samples):
    """Test caption lookup and the caption-order checksum."""
    assert len(bank) == len(TextBank.unique_captions(samples))
    for sample in samples:
        assert bank.captions[bank.index_of(sample.caption)] == sample.caption
    with pytest.raises(ObjectiveError, match="not in text bank"):
        bank.index_of("a green triangle and a green triangle")
    assert bank.to_dict()["checksum"] == bank.checksum()


def test_prediction_distribution_validation():
    """Test distributions must be positive and normalized."""
    with pytest.raises(ObjectiveError):
        PredictionDistribution(np.array([0.5, 0.5, 0.0]))
    with pytest.raises(ObjectiveError):
        PredictionDistribution(np.array([0.5, 0.6]))
    assert PredictionDistribution(np.array([0.2, 0.8], dtype=np.float32)).probs.dtype == np.float64


def test_smoothed_softmax_is_strictly_positive():
    """Test extreme similarities never produce a zero probability."""
    sims = torch.tensor([1.0, -1.0, -1.0], dtype=torch.float64)
    probs = smoothed_softmax(sims, 0.001)

    assert torch.all(probs > 0)
    assert probs.min().item() >= SMOOTHING_FLOOR / 2
    assert abs(probs.sum().item() - 1.0) < 1e-12


def test_smoothed_softmax_temperature_must_be_positive():
    """Test a zero temperature is rejected."""
    with pytest.raises(ObjectiveError, match="Temperature"):
        smoothed_softmax(torch.zeros(3), 0.0)


def test_kl_non_negative_on_random_pairs():
    """Test KL >= 0 over many random smoothed distribution pairs."""
    rng = np.random.default_rng(0)
    sims = torch.tensor(rng.uniform(-1, 1, size=(2, 10_000, 8)))
    temps = rng.uniform(0.01, 1.0, size=2)
    p_all = smoothed_softmax(sims[0], float(temps[0])).numpy()
    q_all = smoothed_softmax(sims[1], float(temps[1])).numpy()

    assert np.allclose(p_all.sum(axis=1), 1.0, atol=1e-9)
    for p, q in zip(p_all, q_all):
        assert kl_divergence(p, q) >= 0.0


def test_kl_of_distribution_with_itself():
    """Test KL(p || p) is zero."""
    p = distribution_from_similarities([0.3, -0.2, 0.9, 0.1], 0.07)
    assert abs(kl_divergence(p, p)) <= 1e-12


def test_kl_known_value():
    """Test KL against the closed form for a two-outcome pair."""
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_divergence(np.array([0.5, 0.5]), np.array([0.9, 0.1])) == pytest.approx(0.5108256, abs=1e-7)
    assert kl_divergence(np.array([0.5, 0.5]), np.array([0.9, 0.1])) == pytest.approx(expected, rel=1e-12)


def test_kl_extreme_pair_is_finite():
    """Test nearly disjoint smoothed distributions give a large but finite KL."""
    tiny = 1e-12
    p = np.array([1 - tiny, tiny])
    q = np.array([tiny, 1 - tiny])
    value = kl_divergence(p, q)

    assert math.isfinite(value)
    assert value == pytest.approx(27.631021, rel=1e-6)


def test_kl_length_mismatch():
    """Test distributions over different banks are rejected."""
    with pytest.raises(ObjectiveError, match="differ in length"):
        kl_divergence(np.array([0.5, 0.5]), np.array([0.2, 0.3, 0.5]))


def test_clip_distribution_sums_to_one(clip_model, bank, samples):
    """Test the model distribution is a valid distribution over the bank."""
    dist = clip_distribution(clip_model, samples[0].image, bank)
    assert len(dist) == len(bank)
    assert abs(dist.probs.sum() - 1.0) <= 1e-9


def test_clip_distribution_singleton_bank(clip_model, bank, samples):
    """Test a one-caption bank always predicts that caption with probability 1."""
    single = TextBank(bank.captions[:1], bank.embeddings[:1])
    dist = clip_distribution(clip_model, samples[0].image, single)
    assert dist.probs.tolist() == [1.0]


def test_clip_distribution_equal_similarities(clip_model, bank, samples):
    """Test two captions with the same embedding split the probability evenly."""
    twin = TextBank(bank.captions[:2], np.stack([bank.embeddings[0], bank.embeddings[0]]))
    dist = clip_distribution(clip_model, samples[0].image, twin)
    assert np.allclose(dist.probs, [0.5, 0.5], atol=1e-12)


def test_clip_distribution_uses_bank_similarities(clip_model, bank, samples):
    """Test the model distribution is the smoothed softmax of embedding-caption similarities."""
    x = samples[0].image
    similarities = clip_model.predict(x[None])[0] @ bank.embeddings.T
    expected = distribution_from_similarities(similarities, clip_model.temperature)
    assert np.allclose(clip_distribution(clip_model, x, bank).probs, expected.probs, atol=1e-12)


def test_distribution_is_shift_invariant():
    """Test adding a constant to every similarity leaves the distribution unchanged."""
    sims = np.array([0.3, -0.2, 0.9, 0.1])
    base = distribution_from_similarities(sims, 0.07)
    shifted = distribution_from_similarities(sims + 0.25, 0.07)
    assert np.allclose(base.probs, shifted.probs, rtol=1e-12, atol=1e-15)


def test_distribution_at_sharp_temperature():
    """Test similarities (1, 0) at T = 0.07 against the two-outcome closed form."""
    dist = distribution_from_similarities([1.0, 0.0], 0.07)
    low = 1.0 / (1.0 + math.exp(1.0 / 0.07))

    assert dist.probs[0] > 0.999999
    assert dist.probs[1] == pytest.approx(low, rel=1e-9)
    assert dist.probs[0] == pytest.approx(1.0 - low, rel=1e-12)


def test_clip_kl_is_zero_at_clean_image(clip_model, bank, samples):
    """Test the KL objective vanishes at its anchor."""
    x = samples[0].image
    value, grad = clip_kl_objective(clip_model, x, x, bank)

    assert abs(value) <= 1e-12
    assert grad.shape == x.shape


def test_clip_kl_positive_away_from_clean(clip_model, bank, samples):
    """Test the KL objective grows once the image moves."""
    x = samples[0].image
    value, _ = clip_kl_objective(clip_model, x, _perturbed(samples[0]), bank)
    assert value > 0


def test_task_objective_rejects_clip_model(clip_model, samples):
    """Test task losses need a dense model."""
    with pytest.raises(ObjectiveError, match="not a dense-task model"):
        task_objective(clip_model, samples[0].image, samples[0].seg_mask)


def test_task_objective_perfect_prediction():
    """Test a saturated correct prediction has zero loss and zero input gradient."""
    model = make_model("detection", seed=5)
    with torch.no_grad():
        model.net.classify.bias[3] += 1e3
    image = np.full((24, 24, 3), 0.5)

    loss, grad = task_objective(model, image, np.full((3, 3), 3))

    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() <= 1e-12


def test_task_objective_uniform_logits():
    """Test constant logits give log K whatever the labels."""
    model = make_model("detection", seed=5)
    with torch.no_grad():
        model.net.classify.weight.zero_()
        model.net.classify.bias.zero_()
    num_classes = model.net.classify.out_channels
    labels = np.arange(9).reshape(3, 3) % num_classes

    loss, grad = task_objective(model, np.full((24, 24, 3), 0.5), labels)

    assert loss == pytest.approx(math.log(num_classes), rel=1e-12)
    assert not grad.any()


def test_task_target_shapes(samples):
    """Test the attacked labels per head kind."""
    sample = samples[0]
    assert task_target(sample, "segmentation").shape == sample.seg_mask.shape
    assert task_target(sample, "detection").shape == sample.cell_labels.shape[:2]
    with pytest.raises(ObjectiveError):
        task_target(sample, "clip_retrieval")


@pytest.mark.parametrize("model_fixture", ["seg_model", "det_model"])
def test_task_gradient_matches_finite_differences(request, model_fixture, gradcheck_samples):
    """Test analytic task-loss input gradients against central differences."""
    model = request.getfixturevalue(model_fixture)
    for index, sample in enumerate(gradcheck_samples):
        target = task_target(sample, model.head_kind)
        image = _perturbed(sample, index)

        def fn(img):
            return task_objective(model, img, target)

        _, grad = fn(image)
        _check_gradient(fn, image, grad, seed=index)


def test_kl_gradient_matches_finite_differences(clip_model, bank, gradcheck_samples):
    """Test analytic KL input gradients against central differences."""
    for index, sample in enumerate(gradcheck_samples):
        objective = ClipKLObjective(clip_model, sample.image, bank)
        image = _perturbed(sample, index)
        _, grad = objective(image)
        _check_gradient(objective, image, grad, seed=index)


def test_joint_objective_with_zero_weight_is_task_objective(seg_model, clip_model, bank, samples):
    """Test w = 0 reproduces the task objective exactly."""
    sample = samples[1]
    image = _perturbed(sample)
    target = task_target(sample, "segmentation")

    joint_loss, joint_grad = joint_objective(
        seg_model, clip_model, image, target, bank, 0.0, x_clean=sample.image
    )
    task_loss, task_grad = task_objective(seg_model, image, target)

    assert joint_loss == task_loss
    assert np.array_equal(joint_grad, task_grad)


def test_joint_objective_adds_weighted_kl(seg_model, clip_model, bank, samples):
    """Test the joint loss is task loss plus w times the KL."""
    sample = samples[1]
    image = _perturbed(sample)
    target = task_target(sample, "segmentation")
    kl = ClipKLObjective(clip_model, sample.image, bank)

    loss, grad = joint_objective(seg_model, clip_model, image, target, bank, 2.0, kl_objective=kl)
    task_loss, task_grad = task_objective(seg_model, image, target)
    kl_value, kl_grad = kl(image)

    assert loss == pytest.approx(task_loss + 2.0 * kl_value)
    assert np.allclose(grad, task_grad + 2.0 * kl_grad)


def test_joint_objective_negative_weight(seg_model, clip_model, bank, samples):
    """Test a negative weight is rejected."""
    sample = samples[0]
    with pytest.raises(ObjectiveError, match="non-negative"):
        joint_objective(seg_model, clip_model, sample.image, sample.seg_mask, bank, -1.0)


def test_gradient_cosine():
    """Test cosine edge cases."""
    a = np.array([1.0, 2.0, -1.0])
    assert gradient_cosine(a, 3 * a) == pytest.approx(1.0)
    assert gradient_cosine(a, -a) == pytest.approx(-1.0)
    assert gradient_cosine(a, np.zeros(3)) is None


def test_gradient_conflict_report(seg_model, clip_model, bank, samples):
    """Test the conflict report covers every sample and is reproducible."""
    first = gradient_conflict_report(seg_model, clip_model, samples, bank, EPS, seed=11)
    second = gradient_conflict_report(seg_model, clip_model, samples, bank, EPS, seed=11)

    assert set(first.cosines) == {s.sample_id for s in samples}
    assert first.cosines == second.cosines
    assert all(c is None or -1.0 <= c <= 1.0 for c in first.cosines.values())

    data = first.to_dict()
    assert data["head_kind"] == "segmentation"
    assert set(data["task_grad_norm"]) == {"l1", "l2"}
    assert data["median_cosine"] == first.median
