import numpy as np
import pytest

from mstream import autograd as ag
from mstream.autograd import Tensor
from mstream.encoder import (
    EncoderConfig,
    conv_frontend,
    conv_output_dim,
    encode_stream,
    lstm_cell,
    output_length,
)
from mstream.model import init_params

from conftest import tiny_model_config


def _cell_params(rng, in_dim, h):
    return (Tensor(rng.normal(size=(in_dim, 4 * h)), requires_grad=True),
            Tensor(rng.normal(size=(h, 4 * h)), requires_grad=True),
            Tensor(rng.normal(size=4 * h), requires_grad=True))


def test_lstm_cell_zero_everything_gives_zero_h():
    h = 3
    w_x = Tensor(np.zeros((2, 4 * h)))
    w_h = Tensor(np.zeros((h, 4 * h)))
    b = Tensor(np.zeros(4 * h))
    out_h, out_c = lstm_cell(Tensor(np.zeros(2)), Tensor(np.zeros(h)), Tensor(np.zeros(h)),
                             w_x, w_h, b)
    np.testing.assert_array_equal(out_h.data, np.zeros(h))


def test_lstm_cell_saturated_forget_keeps_cell_state():
    h = 2
    b = np.zeros(4 * h)
    b[0:h] = -30.0   # input gate driven to 0
    b[h:2 * h] = 30.0  # forget gate driven to 1
    c_prev = np.array([0.3, -0.7])
    _, out_c = lstm_cell(Tensor(np.zeros(3)), Tensor(np.zeros(h)), Tensor(c_prev),
                         Tensor(np.zeros((3, 4 * h))), Tensor(np.zeros((h, 4 * h))),
                         Tensor(b))
    assert np.max(np.abs(out_c.data - c_prev)) < 1e-6


def test_lstm_cell_gradcheck():
    rng = np.random.default_rng(2)
    w_x, w_h, b = _cell_params(rng, 3, 2)
    params = {"w_x": w_x, "w_h": w_h, "b": b,
              "x": Tensor(rng.normal(size=3), requires_grad=True),
              "h": Tensor(rng.normal(size=2), requires_grad=True),
              "c": Tensor(rng.normal(size=2), requires_grad=True)}

    def f():
        out_h, out_c = lstm_cell(params["x"], params["h"], params["c"],
                                 params["w_x"], params["w_h"], params["b"])
        return ag.add(ag.tensor_sum(ag.mul(out_h, out_h)), ag.tensor_sum(out_c))

    assert ag.gradient_check(f, params) < 1e-4


@pytest.mark.parametrize("kind", ["blstm", "convblstm"])
def test_subsampling_law(kind):
    cfg = tiny_model_config(n_streams=1, kind=kind)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    for t in range(4, 65):
        out = encode_stream(rng.normal(size=(t, cfg.input_dims[0])), cfg.encoder,
                            params, "enc0")
        assert out.shape == (output_length(t), cfg.encoder.projection), f"T={t}"


def test_subsample_examples():
    assert output_length(16) == 4
    assert output_length(17) == 5


def test_encoder_deterministic_and_param_tied():
    cfg = tiny_model_config(n_streams=2)
    params = init_params(cfg, seed=1)
    # tie the two stream encoders
    for name in list(params):
        if name.startswith("enc1."):
            params[name] = params["enc0." + name[len("enc1."):]]
    rng = np.random.default_rng(3)
    x = rng.normal(size=(13, cfg.input_dims[0]))
    a = encode_stream(x, cfg.encoder, params, "enc0")
    b = encode_stream(x, cfg.encoder, params, "enc1")
    np.testing.assert_array_equal(a.data, b.data)


def test_time_reversal_symmetry():
    """Swapping direction parameters and reversing input reverses the output.

    Lengths with T = 4m+1 keep the subsampled frame grid symmetric under
    reversal, so the comparison is exact up to summation order.
    """
    cfg = tiny_model_config(n_streams=1)
    params = init_params(cfg, seed=5)
    swapped = dict(params)
    for layer in range(cfg.encoder.layers):
        for tail in ("w_x", "w_h", "b"):
            f = f"enc0.l{layer}.fwd.{tail}"
            b = f"enc0.l{layer}.bwd.{tail}"
            swapped[f], swapped[b] = params[b], params[f]
        # concat order [fwd; bwd] flips too, so swap the projection halves
        w = params[f"enc0.l{layer}.proj.w"].data
        h = w.shape[0] // 2
        swapped[f"enc0.l{layer}.proj.w"] = Tensor(np.vstack([w[h:], w[:h]]))
    rng = np.random.default_rng(7)
    x = rng.normal(size=(17, cfg.input_dims[0]))
    fwd = encode_stream(x, cfg.encoder, params, "enc0")
    rev = encode_stream(x[::-1], cfg.encoder, swapped, "enc0")
    np.testing.assert_allclose(rev.data, fwd.data[::-1], atol=1e-12)


def test_encode_rejects_empty():
    cfg = tiny_model_config(n_streams=1)
    params = init_params(cfg, seed=0)
    with pytest.raises(ValueError):
        encode_stream(np.zeros((0, cfg.input_dims[0])), cfg.encoder, params, "enc0")


def test_conv_frontend_time_law_and_zero_case():
    cfg = tiny_model_config(n_streams=1, kind="convblstm")
    params = init_params(cfg, seed=2)
    rng = np.random.default_rng(1)
    out = conv_frontend(rng.normal(size=(16, cfg.input_dims[0])), params, "enc0")
    assert out.shape == (4, conv_output_dim(cfg.input_dims[0], cfg.encoder))

    for name in params:
        if ".conv" in name and name.endswith(".b"):
            params[name] = Tensor(np.zeros(params[name].shape))
    out = conv_frontend(np.zeros((8, cfg.input_dims[0])), params, "enc0")
    np.testing.assert_array_equal(out.data, np.zeros(out.shape))


def test_conv_frontend_rejects_short_input():
    cfg = tiny_model_config(n_streams=1, kind="convblstm")
    params = init_params(cfg, seed=2)
    with pytest.raises(ValueError):
        conv_frontend(np.zeros((3, cfg.input_dims[0])), params, "enc0")


def test_conv_frontend_gradcheck():
    cfg = tiny_model_config(n_streams=1, kind="convblstm")
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, cfg.input_dims[0]))
    conv_params = {k: v for k, v in params.items() if ".conv" in k}

    def f():
        out = conv_frontend(x, params, "enc0")
        return ag.tensor_sum(ag.mul(out, out))

    assert ag.gradient_check(f, conv_params, eps=1e-6) < 1e-4


def test_full_encoder_gradcheck_small():
    cfg = tiny_model_config(n_streams=1)
    params = init_params(cfg, seed=8)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, cfg.input_dims[0]))
    subset = {k: v for k, v in params.items() if k.startswith("enc0.l0.fwd")}

    def f():
        out = encode_stream(x, cfg.encoder, params, "enc0")
        return ag.tensor_sum(ag.tanh(out))

    assert ag.gradient_check(f, subset) < 1e-4


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(kind="transformer")
    with pytest.raises(ValueError):
        EncoderConfig(subsample=(2, 3))
    with pytest.raises(ValueError):
        EncoderConfig(layers=3, subsample=(2, 2))
