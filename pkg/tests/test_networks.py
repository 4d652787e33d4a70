import numpy as np
import pytest

from gradcheck import bundle_fd_error, jitter_biases
from toor.autodiff import ConfigurationError, LayerStack, softmax_cross_entropy
from toor.networks import (CHECKPOINT_MAGIC, ModelBundle, NetworkConfig, classify, discriminate,
                           feature_extract, load_checkpoint, predict_logits, save_checkpoint)


def small_bundle(seed=0, **kw):
    cfg = NetworkConfig(input_dim=3, n_classes=4, feature_dim=5, hidden=(6,), disc_hidden=7, **kw)
    return ModelBundle.create(cfg, np.random.default_rng(seed))


def test_identity_single_linear_extractor():
    cfg = NetworkConfig(2, 2, feature_dim=2, hidden=(), noise_std=0.0)
    bundle = ModelBundle.create(cfg, np.random.default_rng(0))
    bundle.extractor.layers[1].params["W"][...] = np.eye(2)
    out, _ = feature_extract(bundle, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_extractor_eval_is_pure():
    b = small_bundle()
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(feature_extract(b, x)[0], feature_extract(b, x)[0])


def test_extractor_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        feature_extract(small_bundle(), np.ones((2, 4)))


def test_zero_classifier_gives_zero_logits():
    b = small_bundle()
    for p in b.classifier.parameters():
        p[...] = 0.0
    logits, _ = classify(b, np.random.default_rng(2).normal(size=(3, 5)))
    np.testing.assert_array_equal(logits, 0.0)
    assert logits.shape == (3, 4)


def test_identity_classifier():
    cfg = NetworkConfig(2, 2, feature_dim=2)
    b = ModelBundle.create(cfg, np.random.default_rng(0))
    b.classifier.layers[0].params["W"][...] = np.eye(2)
    logits, _ = classify(b, np.array([0.3, 0.7]))
    np.testing.assert_allclose(logits, [0.3, 0.7])


def test_zero_final_discriminator_layer_gives_half():
    b = small_bundle()
    for p in b.discriminator.layers[-2].params.values():
        p[...] = 0.0
    prob, _ = discriminate(b, np.random.default_rng(3).normal(size=(4, 5)))
    np.testing.assert_array_equal(prob, 0.5)


def test_discriminator_forward_independent_of_flip():
    b = small_bundle()
    f = np.random.default_rng(4).normal(size=(4, 5))
    np.testing.assert_array_equal(discriminate(b, f, 0.0)[0], discriminate(b, f, 1.0)[0])


def test_discriminate_feature_gradient_flips():
    b = small_bundle()
    f = np.random.default_rng(5).normal(size=(4, 5))
    prob, tape = discriminate(b, f, 1.0)
    g_rev, _ = b.discriminator.backward(tape, np.ones((4, 1)))
    free = LayerStack(b.discriminator.layers[1:])
    _, t2 = free.forward(f)
    g_free, _ = free.backward(t2, np.ones((4, 1)))
    np.testing.assert_array_equal(g_rev, -g_free)


def test_discriminator_shape():
    b = small_bundle()
    names = [type(l).__name__ for l in b.discriminator.layers]
    assert names == ["GradientReversal", "Linear", "ReLU", "Dropout", "Linear", "ReLU",
                     "Dropout", "Linear", "Sigmoid"]


def test_end_to_end_ce_gradient():
    b = small_bundle()
    jitter_biases(b, np.random.default_rng(6))
    x = np.random.default_rng(6).normal(size=(6, 3))
    y = np.array([0, 1, 2, 3, 1, 2])

    def fn():
        feats, ft = feature_extract(b, x)
        logits, ct = classify(b, feats)
        loss, grad = softmax_cross_entropy(logits, y)
        gf, gc = b.classifier.backward(ct, grad)
        _, ge = b.extractor.backward(ft, gf)
        return loss.sum(), {"extractor": ge, "classifier": gc}

    assert bundle_fd_error(b, fn, {}) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    b = small_bundle(seed=9)
    b.iteration = 17
    b.adam["extractor"].t = 5
    x = np.random.default_rng(7).normal(size=(10, 3))
    path = save_checkpoint(b, tmp_path / "ckpt.bin")
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC.encode())
    back = load_checkpoint(path)
    assert back.iteration == 17 and back.adam["extractor"].t == 5
    np.testing.assert_array_equal(predict_logits(back, x), predict_logits(b, x))
    for name in ("extractor", "classifier", "discriminator"):
        for p, q in zip(b.stacks()[name].parameters(), back.stacks()[name].parameters()):
            np.testing.assert_array_equal(p, q)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"hello\n{}\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = save_checkpoint(small_bundle(), tmp_path / "ckpt.bin")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NetworkConfig(2, 1)
    with pytest.raises(ConfigurationError):
        NetworkConfig(2, 3, feature_dim=0)
