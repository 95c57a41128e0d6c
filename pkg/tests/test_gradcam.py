import numpy as np
import pytest
from sklearn.base import clone

from wsmots.gradcam import GradCAM, gradcam, normalize_minmax

A = np.array([[[1.0, 2.0], [3.0, 4.0]]])


def test_hand_example_both_variants():
    expected = np.array([[0.0, 1 / 3], [2 / 3, 1.0]])
    for variant in ("original", "absolute"):
        assert np.allclose(gradcam(A, np.ones_like(A), variant), expected, atol=0, rtol=1e-15)


def test_negative_gradients():
    g = -np.ones_like(A)
    assert (gradcam(A, g, "original") == 0).all()
    assert np.allclose(gradcam(A, g, "absolute"), normalize_minmax(A[0]))


def test_constant_raw_map_gives_zeros():
    acts = np.full((3, 4, 4), 2.0)
    assert (gradcam(acts, np.ones_like(acts)) == 0).all()


def test_normalize_minmax():
    assert np.allclose(normalize_minmax([0.0, 1.0, 2.0]), [0.0, 0.5, 1.0])
    assert (normalize_minmax(np.full(5, 3.0)) == 0).all()
    x = np.array([0.0, 0.25, 1.0])
    assert np.array_equal(normalize_minmax(x), x)


def test_sign_flip(rng):
    for _ in range(50):
        acts = rng.random((6, 7, 7))
        grads = rng.standard_normal((6, 7, 7))
        assert np.array_equal(gradcam(acts, grads, "absolute"), gradcam(acts, -grads, "absolute"))
    # the original variant is not invariant on these inputs
    acts = rng.random((6, 7, 7))
    grads = rng.standard_normal((6, 7, 7))
    assert not np.allclose(gradcam(acts, grads, "original"), gradcam(acts, -grads, "original"))


def test_range_argmax_and_scale(rng):
    for variant in ("original", "absolute"):
        for _ in range(30):
            acts = rng.random((4, 9, 9))
            grads = rng.standard_normal((4, 9, 9)) + 0.3
            hm = gradcam(acts, grads, variant)
            assert hm.min() >= 0 and hm.max() <= 1
            alpha = grads.mean(axis=(1, 2))
            w = np.abs(alpha) if variant == "absolute" else alpha
            raw = np.tensordot(w, acts, axes=1)
            if variant == "original":
                raw = np.maximum(raw, 0)
            if raw.max() > raw.min():
                assert np.argmax(hm) == np.argmax(raw)
            assert np.allclose(gradcam(3.7 * acts, grads, variant), hm)


def test_shape_errors():
    with pytest.raises(ValueError):
        gradcam(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        gradcam(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), "relu")


def test_estimator(rng):
    est = GradCAM(variant="original")
    assert est.get_params() == {"variant": "original"}
    assert clone(est).set_params(variant="absolute").variant == "absolute"
    acts = rng.random((5, 3, 6, 6))
    grads = rng.standard_normal((5, 3, 6, 6))
    out = est.fit_transform(acts, grads)
    assert out.shape == (5, 6, 6)
    assert np.array_equal(out[2], gradcam(acts[2], grads[2], "original"))
