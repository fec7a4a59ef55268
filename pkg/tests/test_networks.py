import logging

import numpy as np
import pytest

from dannseg.error import DannSegError, ErrorCode
from dannseg.functional import cross_entropy
from dannseg.networks import (
    DISC,
    SEG_CONV,
    SEG_OTHER,
    DiscriminatorConfig,
    UNetConfig,
    discriminator_for,
    discriminator_forward,
    domain_probabilities,
    init_parameters,
    pooling_plan,
    unet_forward,
)
from dannseg.tensor import Tape, Tensor


@pytest.fixture
def segmenter(tiny_unet_config):
    return init_parameters(tiny_unet_config, seed=3, dtype=np.float64)


@pytest.fixture
def discriminator(tiny_unet_config, tiny_disc_config):
    return init_parameters(discriminator_for(tiny_unet_config, tiny_disc_config), seed=4, dtype=np.float64)


def test_unet_shapes_and_probabilities(segmenter, rng):
    out = unet_forward(segmenter, rng.normal(size=(3, 1, 16, 16)))
    assert out.probs.shape == (3, 4, 16, 16)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert out.taps["penultimate"].shape == (3, 2, 16, 16)
    assert out.taps["bottleneck"].shape == (3, 8, 4, 4)


def test_unet_rejects_indivisible_input(segmenter):
    with pytest.raises(DannSegError) as info:
        unet_forward(segmenter, np.zeros((1, 1, 18, 18)))
    assert info.value.code == ErrorCode.SHAPE_MISMATCH
    with pytest.raises(DannSegError):
        unet_forward(segmenter, np.zeros((1, 2, 16, 16)))


def test_unet_config_checks_divisibility():
    with pytest.raises(DannSegError) as info:
        UNetConfig(input_size=20, depth=3).validate()
    assert info.value.code == ErrorCode.INVALID_CONFIG


def test_discriminator_returns_domain_logits(segmenter, discriminator, rng):
    out = unet_forward(segmenter, rng.normal(size=(4, 1, 16, 16)))
    logits = discriminator_forward(discriminator, out.taps)
    assert logits.shape == (4, 3)
    np.testing.assert_allclose(domain_probabilities(logits).data.sum(axis=1), 1.0)


def test_zero_final_layer_gives_uniform_domains(segmenter, discriminator, rng):
    last = f"fc{len(discriminator.config.fc_widths)}"
    discriminator[f"{last}.weight"].data[:] = 0.0
    discriminator[f"{last}.bias"].data[:] = 0.0
    out = unet_forward(segmenter, rng.normal(size=(2, 1, 16, 16)))
    probs = domain_probabilities(discriminator_forward(discriminator, out.taps)).data
    np.testing.assert_allclose(probs, np.full((2, 3), 1 / 3))


def test_forward_is_deterministic(segmenter, rng):
    x = rng.normal(size=(2, 1, 16, 16))
    first = unet_forward(segmenter, x, mode="eval").probs.data
    np.testing.assert_array_equal(first, unet_forward(segmenter, x, mode="eval").probs.data)


def test_he_init_scale():
    params = init_parameters(UNetConfig(input_size=16, base_channels=16, depth=2), seed=0, dtype=np.float64)
    kernels = [t.data for name, t in params.items() if name.endswith(".weight") and t.shape[1:] == (16, 3, 3)]
    assert kernels
    for kernel in kernels:
        assert abs(kernel.std() - np.sqrt(2 / 144)) <= 0.2 * np.sqrt(2 / 144)
    biases = [t.data for name, t in params.items() if name.endswith(".bias")]
    assert all(not b.any() for b in biases)


def test_discriminator_needs_bound_taps(tiny_disc_config):
    with pytest.raises(DannSegError):
        init_parameters(tiny_disc_config, seed=0)


def test_partitions_cover_every_tensor(segmenter, discriminator):
    seg_conv = set(segmenter.names(SEG_CONV))
    seg_other = set(segmenter.names(SEG_OTHER))
    assert seg_conv and seg_other
    assert seg_conv | seg_other == set(segmenter.names())
    assert not seg_conv & seg_other
    assert all(".conv" in n or n.startswith("head.") for n in seg_conv)
    assert all(n.endswith((".gamma", ".beta")) for n in seg_other)
    assert set(discriminator.names(DISC)) == set(discriminator.names())


def test_adversarial_batchnorm_moves_affine_into_conv_partition(tiny_unet_config):
    tiny_unet_config.adversarial_batchnorm = True
    params = init_parameters(tiny_unet_config, seed=0)
    assert params.names(SEG_OTHER) == []
    assert set(params.names(SEG_CONV)) == set(params.names())


def test_init_is_deterministic_and_precision_independent(tiny_unet_config):
    a = init_parameters(tiny_unet_config, seed=11, dtype=np.float64)
    b = init_parameters(tiny_unet_config, seed=11, dtype=np.float64)
    c = init_parameters(tiny_unet_config, seed=11, dtype=np.float32)
    assert a.fingerprint() == b.fingerprint()
    for name in a:
        np.testing.assert_array_equal(a[name].data.astype(np.float32), c[name].data)
    assert init_parameters(tiny_unet_config, seed=12).fingerprint() != c.fingerprint()


def test_eval_mode_uses_running_stats_and_leaves_them(segmenter, rng):
    before = segmenter.running_fingerprint()
    x = rng.normal(size=(2, 1, 16, 16))
    first = unet_forward(segmenter, x, mode="eval").probs.data
    second = unet_forward(segmenter, x[:1], mode="eval").probs.data
    np.testing.assert_allclose(first[:1], second)
    assert segmenter.running_fingerprint() == before


def test_train_mode_without_update_keeps_running_stats(segmenter, rng):
    before = segmenter.running_fingerprint()
    unet_forward(segmenter, rng.normal(size=(2, 1, 16, 16)), update_stats=False)
    assert segmenter.running_fingerprint() == before
    unet_forward(segmenter, rng.normal(size=(2, 1, 16, 16)))
    assert segmenter.running_fingerprint() != before


def test_domain_loss_reaches_the_segmenter_through_the_taps(segmenter, discriminator, rng):
    targets = Tensor(np.eye(3)[[0, 1, 2, 0]])
    with Tape() as tape:
        out = unet_forward(segmenter, rng.normal(size=(4, 1, 16, 16)), update_stats=False)
        logits = discriminator_forward(discriminator, out.taps, update_stats=False)
        loss = cross_entropy(domain_probabilities(logits), targets)
    tape.backward(loss)

    for name, tensor in segmenter.items(SEG_CONV):
        if name.startswith("head."):
            # the output head sits after both taps
            np.testing.assert_array_equal(tensor.grad, 0.0)
        elif name.endswith(".bias"):
            # a bias feeding batch norm cancels out of the normalised activations
            np.testing.assert_allclose(tensor.grad, 0.0, atol=1e-10)
        else:
            assert np.abs(tensor.grad).max() > 1e-10, name
    for name, tensor in segmenter.items(SEG_OTHER):
        assert np.abs(tensor.grad).max() > 1e-10, name


def test_copy_is_independent(segmenter):
    clone = segmenter.copy()
    assert clone.fingerprint() == segmenter.fingerprint()
    clone["head.bias"].data = clone["head.bias"].data + 1.0
    assert clone.fingerprint() != segmenter.fingerprint()


def test_pooling_plan_skips_odd_maps():
    assert pooling_plan(16, 3) == [True, True, True]
    assert pooling_plan(4, 3) == [True, True, False]
    assert pooling_plan(3, 2) == [False, False]


def test_discriminator_for_reports_skipped_pooling(caplog):
    unet = UNetConfig(input_size=16, base_channels=2, depth=2)
    with caplog.at_level(logging.DEBUG, logger="dannseg.networks"):
        discriminator_for(unet, DiscriminatorConfig(conv_channels=(2, 4)))
        assert not [r for r in caplog.records if "skips" in r.getMessage()]
        discriminator_for(unet, DiscriminatorConfig(conv_channels=(2, 4, 8)))
    messages = [r.getMessage() for r in caplog.records if "skips" in r.getMessage()]
    assert messages == ["Discriminator bottleneck branch (4x4) skips 2x2 pooling at stages [2]"]
