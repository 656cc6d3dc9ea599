import numpy as np
import pytest

import ldmorph


def test_phantom_pair_shapes_and_labels():
    p = ldmorph.generate_phantom_pair(3, size=64)
    assert p["moving"].shape == (64, 64)
    assert p["fixed"].dtype == np.float64
    assert set(np.unique(p["fixed_labels"])) <= {0, 1, 2}
    again = ldmorph.generate_phantom_pair(3, size=64)
    assert np.array_equal(p["moving"], again["moving"])


def test_zero_field_is_identity():
    p = ldmorph.generate_phantom_pair(4, size=48)
    zero = np.zeros((2, 48, 48))
    assert np.array_equal(ldmorph.warp_image(p["moving"], zero), p["moving"])
    assert np.array_equal(ldmorph.warp_labels(p["moving_labels"], zero), p["moving_labels"])
    assert ldmorph.folding_percent(zero) == 0.0
    assert np.all(ldmorph.jacobian_determinant(zero) == 1.0)


def test_dsc_hand_value():
    pred = np.array([[1, 1], [0, 0]])
    target = np.array([[1, 0], [0, 0]])
    mean, per_label = ldmorph.dsc(pred, target, [1])
    assert mean == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert per_label[1] == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_losses_and_field():
    ramp = np.zeros((2, 4, 4))
    ramp[0] = np.arange(4)[None, :]
    assert ldmorph.loss_smooth(ramp) == pytest.approx(12.0)
    a = np.random.default_rng(0).random((8, 8))
    assert ldmorph.loss_org(a, a) == 0.0
    f = ldmorph.random_smooth_field(1, 64, 2.0, 16.0)
    assert np.sqrt((f**2).sum(0)).max() == pytest.approx(2.0, rel=1e-9)
    assert ldmorph.folding_percent(f) == 0.0


def test_schedule_and_q_sample():
    s = ldmorph.noise_schedule(50)
    assert s["alpha_bar"][0] == 1.0
    assert len(s["beta"]) == 51
    z0 = np.ones(3)
    out = ldmorph.q_sample(z0, 7, np.zeros(3), T=50)
    assert np.allclose(out, np.sqrt(s["alpha_bar"][7]))


def test_config_round_trip_and_errors():
    cfg = ldmorph.RunConfig.parse("[train]\nepochs = 3\n")
    cfg.set("loss.beta=0.4")
    cfg.validate()
    assert "beta = 0.4" in cfg.to_ini()
    with pytest.raises(ValueError):
        ldmorph.RunConfig.parse("[train]\nnot_a_key = 1\n")


def test_preprocess_pads_to_canvas():
    img = np.random.default_rng(1).random((60, 80))
    out = ldmorph.preprocess(img, 56, 64)
    assert out.shape == (64, 64)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_missing_checkpoint_raises():
    img = np.zeros((64, 64))
    with pytest.raises(RuntimeError):
        ldmorph.register_pair("/nonexistent/regnet.ckpt", img, img)
