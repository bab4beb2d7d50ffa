"""Tests for models module."""

import numpy as np
import pytest
import torch

from stagedpgd.core.dataset import NUM_CLASSES
from stagedpgd.core.models import (
    PIXEL_MEAN,
    PIXEL_STD,
    ModelError,
    ModelSet,
    build_net,
    dense_cross_entropy,
    input_gradient,
    preprocess,
    tensor_checksum,
)

from .conftest import make_model


def test_preprocess_layout_and_scale():
    """Test NHWC intensities become normalized NCHW."""
    images = torch.full((2, 4, 5, 3), 0.75)
    out = preprocess(images)
    assert out.shape == (2, 3, 4, 5)
    assert torch.allclose(out, torch.full_like(out, (0.75 - PIXEL_MEAN) / PIXEL_STD))


def test_build_net_unknown_head():
    """Test unknown head kinds are rejected."""
    with pytest.raises(ModelError, match="Unknown head kind"):
        build_net("captioning", {})


def test_output_shapes(clip_model, seg_model, det_model, samples):
    """Test head output layouts on a small batch."""
    images = np.stack([s.image for s in samples[:2]])

    embeddings = clip_model.image_embeddings(images)
    assert embeddings.shape == (2, 16)
    assert np.allclose(np.linalg.norm(embeddings, axis=1), 1.0)

    assert seg_model.predict(images).shape == (2, NUM_CLASSES, 24, 24)
    assert seg_model.predict_masks(images).shape == (2, 24, 24)
    assert det_model.predict(images).shape == (2, NUM_CLASSES, 3, 3)


def test_predict_cells(det_model, samples):
    """Test per-cell scores and foreground classes."""
    scores, classes = det_model.predict_cells(np.stack([s.image for s in samples]))
    assert scores.shape == classes.shape == (len(samples), 3, 3)
    assert np.all((scores > 0) & (scores < 1))
    assert classes.min() >= 1 and classes.max() < NUM_CLASSES


def test_head_specific_methods(clip_model, seg_model, det_model, samples):
    """Test head-specific predictions refuse the wrong head."""
    image = samples[0].image
    with pytest.raises(ModelError, match="not a segmentation model"):
        det_model.predict_masks(image)
    with pytest.raises(ModelError, match="not a detection model"):
        seg_model.predict_cells(image)
    with pytest.raises(ModelError, match="no text encoder"):
        seg_model.text_embeddings(["a red circle"])
    with pytest.raises(ModelError, match="no retrieval temperature"):
        seg_model.temperature
    assert clip_model.temperature == pytest.approx(0.07)


def test_text_embeddings_unit_norm(clip_model):
    """Test text embeddings are normalized and unknown words are rejected."""
    emb = clip_model.text_embeddings(["a red circle", "a blue square and a green triangle"])
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0)
    with pytest.raises(ModelError, match="outside the caption vocabulary"):
        clip_model.text_embeddings(["a purple hexagon"])


def test_input_gradient_shape_and_determinism(seg_model, samples):
    """Test the gradient has the image's shape and is reproducible."""
    sample = samples[0]
    image = sample.image
    loss_a, grad_a = input_gradient(seg_model, image, sample.seg_mask)
    loss_b, grad_b = input_gradient(seg_model, image, sample.seg_mask)

    assert grad_a.shape == image.shape
    assert grad_a.dtype == np.float64
    assert loss_a > 0
    assert loss_a == loss_b
    assert np.array_equal(grad_a, grad_b)


def test_input_gradient_target_mismatch(seg_model, det_model, samples):
    """Test labels that do not fit the head raise ModelError."""
    sample = samples[0]
    with pytest.raises(ModelError, match="does not match head output"):
        input_gradient(seg_model, sample.image, sample.cell_classes)
    with pytest.raises(ModelError, match="does not match head output"):
        input_gradient(det_model, sample.image, sample.seg_mask)


def test_input_gradient_clip_needs_loss_target(clip_model, samples):
    """Test the contrastive model cannot be given dense labels."""
    with pytest.raises(ModelError, match="need a loss target"):
        input_gradient(clip_model, samples[0].image, samples[0].seg_mask)


def test_dense_cross_entropy_range_check():
    """Test class ids outside the head's range are rejected."""
    logits = torch.zeros(1, 3, 2, 2)
    with pytest.raises(ModelError, match="outside the head's range"):
        dense_cross_entropy(logits, np.full((2, 2), 3))
    assert dense_cross_entropy(logits, np.zeros((2, 2))).item() == pytest.approx(np.log(3))


def test_to_precision_copies(seg_model):
    """Test precision changes return an independent copy."""
    single = seg_model.to_precision(torch.float32)
    assert single.dtype == torch.float32
    assert single.numpy_dtype == np.float32
    assert seg_model.dtype == torch.float64
    assert single.net is not seg_model.net


def test_tensor_checksum_tracks_weights():
    """Test checksums are equal for equal weights and change with them."""
    a = make_model("segmentation", seed=9)
    b = make_model("segmentation", seed=9)
    assert tensor_checksum(a.net) == tensor_checksum(b.net)
    assert a.backbone_checksum() == b.backbone_checksum()

    with torch.no_grad():
        b.net.backbone.stem.weight.add_(1.0)
    assert a.backbone_checksum() != b.backbone_checksum()


def test_model_set_lookup(models):
    """Test missing models are reported by head kind."""
    assert models.dense_model("segmentation").head_kind == "segmentation"
    assert models.control_model("detection").name == "detection-control"
    with pytest.raises(ModelError, match="No detection model"):
        ModelSet(clip=models.clip).dense_model("detection")


def test_invalid_model_metadata():
    """Test unknown backbone origins are rejected."""
    with pytest.raises(ModelError, match="backbone origin"):
        make_model("segmentation", origin="imagenet")
