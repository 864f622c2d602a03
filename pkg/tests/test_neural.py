import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwm import diffcore as dc
from pwm.diffcore import Tensor
from pwm.neural import (Adam, Mlp, MlpSpec, TwoHotCodec, adam_init, adam_step, mlp_forward, simnorm, symexp, symlog,
                        two_hot_decode_diff, two_hot_decode_eval, two_hot_encode)

from oracles import check_op_gradients


def test_simnorm_groups_are_simplices():
    z = np.random.default_rng(0).standard_normal((4, 16)) * 5
    out = simnorm(Tensor(z), 8).data.reshape(4, 2, 8)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, rtol=1e-6)


def test_simnorm_rejects_indivisible_width():
    with pytest.raises(dc.ShapeError):
        simnorm(Tensor(np.zeros((2, 10))), 8)


def test_simnorm_gradient():
    z = np.random.default_rng(1).standard_normal((3, 8))
    assert check_op_gradients(lambda x: simnorm(x, 4), [z]) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_symexp_inverts_symlog(x):
    assert math.isclose(float(symexp(symlog(np.float64(x)))), x, rel_tol=1e-9, abs_tol=1e-9)


def test_symlog_gradients():
    x = np.array([-3.0, -0.4, 0.3, 2.5])
    assert check_op_gradients(symlog, [x]) <= 1e-6
    assert check_op_gradients(symexp, [x]) <= 1e-6


def test_mlp_layout_and_shapes():
    spec = MlpSpec(3, (8, 8), 2, use_layer_norm=True)
    mlp = Mlp(spec, np.random.default_rng(0))
    assert len(mlp.params) == 2 * 4 + 2
    assert mlp(Tensor(np.zeros((5, 3)))).shape == (5, 2)
    with pytest.raises(dc.ShapeError):
        mlp(Tensor(np.zeros((5, 4))))


def test_mlp_zero_final_outputs_zero():
    mlp = Mlp(MlpSpec(3, (4,), 5, zero_final=True), np.random.default_rng(0))
    np.testing.assert_array_equal(mlp(Tensor(np.ones((2, 3)))).data, 0.0)


@pytest.mark.parametrize("kw", [dict(hidden_activation="gelu"), dict(output_activation="simnorm", output_dim=5),
                                dict(hidden_dims=(0,))])
def test_mlp_spec_validation(kw):
    base = dict(input_dim=3, hidden_dims=(8,), output_dim=8)
    base.update(kw)
    with pytest.raises(ValueError):
        MlpSpec(**base)


@pytest.mark.parametrize("act", ["relu", "mish", "simnorm"])
def test_mlp_gradients_match_finite_differences(act):
    spec = MlpSpec(3, (8,), 2, hidden_activation=act, simplex_dim=4)
    with dc.precision(np.float64):
        mlp = Mlp(spec, np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((4, 3))
    arrays = [p.data for p in mlp.params]
    assert check_op_gradients(lambda *ps: mlp_forward(spec, ps, Tensor(x)), arrays) <= 1e-6


# ---------------------------------------------------------------------------
# two-hot codec

CODEC = TwoHotCodec(101, -10.0, 10.0)


def test_two_hot_rows_are_two_sparse_distributions():
    r = np.linspace(float(symexp(-10.0)), float(symexp(10.0)), 1000)
    enc = two_hot_encode(CODEC, r, dtype=np.float64)
    assert np.all(enc >= 0)
    np.testing.assert_allclose(enc.sum(-1), 1.0, rtol=1e-12)
    nz = (enc > 0).sum(-1)
    assert np.all(nz <= 2)
    for row in enc:
        idx = np.flatnonzero(row)
        assert len(idx) == 1 or idx[1] - idx[0] == 1


def test_two_hot_round_trip_within_bin_tolerance():
    r = np.linspace(float(symexp(-10.0)), float(symexp(10.0)), 1000)
    enc = two_hot_encode(CODEC, r, dtype=np.float64)
    # logits whose softmax is the encoding (tiny floor for empty bins)
    with dc.precision(np.float64):
        dec = two_hot_decode_eval(CODEC, np.log(enc + 1e-300))
    tol = np.abs(r) * (math.exp(CODEC.bin_size) - 1) + 1e-9
    assert np.all(np.abs(dec - r) <= tol)


def test_two_hot_clips_out_of_range():
    enc = two_hot_encode(CODEC, np.array([1e9, -1e9]))
    assert enc[0, -1] == pytest.approx(1.0) and enc[1, 0] == pytest.approx(1.0)


def test_two_hot_expectation_recovers_symlog():
    r = np.array([-37.0, -1.0, 0.0, 0.4, 900.0])
    enc = two_hot_encode(CODEC, r, dtype=np.float64)
    np.testing.assert_allclose(enc @ CODEC.support, symlog(r), atol=1e-12)


def test_two_hot_decode_diff_gradient():
    logits = np.random.default_rng(0).standard_normal((2, CODEC.num_bins))
    assert check_op_gradients(lambda z: two_hot_decode_diff(CODEC, z), [logits]) <= 1e-6
    with pytest.raises(dc.ShapeError):
        two_hot_decode_diff(CODEC, Tensor(np.zeros((2, 7))))


# ---------------------------------------------------------------------------
# Adam

def test_adam_first_step_moves_by_lr_in_sign_direction():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    st_ = adam_init([p], lr=0.1)
    adam_step(st_, [p], [np.array([0.5, -4.0, 0.0])])
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_clips_global_norm_and_reports_pre_clip_norm():
    p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    st_ = adam_init([p], lr=0.1, clip=1.0)
    norm = adam_step(st_, [p], [np.array([3.0, 4.0])])
    assert norm == pytest.approx(5.0)
    assert st_.m[0] == pytest.approx(0.1 * np.array([0.6, 0.8]))


def test_adam_skips_non_finite_gradients():
    p = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    st_ = adam_init([p])
    norm = adam_step(st_, [p], [np.array([np.nan, 1.0])])
    assert not math.isfinite(norm)
    assert st_.skipped == 1 and st_.step == 0
    np.testing.assert_array_equal(p.data, 1.0)


def test_adam_wrapper_minimises_quadratic_and_clears_grads():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(400):
        dc.sum(dc.square(p)).backward()
        opt.step()
    assert p.grad is None
    assert np.all(np.abs(p.data) < 1e-2)


# ---------------------------------------------------------------------------
# worked values


def test_simnorm_worked_values():
    np.testing.assert_allclose(simnorm(Tensor(np.zeros((1, 4))), 4).data, 0.25)
    z = np.zeros((1, 16))
    z[0, 0] = z[0, 8] = 10.0
    out = simnorm(Tensor(z), 8).data.reshape(2, 8)
    assert np.all(out[:, 0] > 0.99)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_mlp_simnorm_output_groups_sum_to_one():
    mlp = Mlp(MlpSpec(3, (8,), 16, output_activation="simnorm", simplex_dim=8), np.random.default_rng(0))
    out = mlp(Tensor(np.random.default_rng(1).standard_normal((5, 3)))).data.reshape(5, 2, 8)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_symlog_worked_values():
    assert float(symlog(np.float64(0.0))) == 0.0
    assert float(symlog(np.float64(math.e - 1))) == pytest.approx(1.0, abs=1e-12)
    assert float(symexp(symlog(np.float64(-42.5)))) == pytest.approx(-42.5, abs=1e-5)


def test_two_hot_worked_values():
    enc = two_hot_encode(CODEC, np.array([0.0]), dtype=np.float64)[0]
    assert enc[50] == 1.0 and enc.sum() == 1.0
    mid = float(symexp(0.5 * (CODEC.support[60] + CODEC.support[61])))
    enc = two_hot_encode(CODEC, np.array([mid]), dtype=np.float64)[0]
    assert enc[60] == pytest.approx(0.5) and enc[61] == pytest.approx(0.5)
    with dc.precision(np.float64):
        assert float(two_hot_decode_eval(CODEC, np.zeros((1, 101)))[0]) == pytest.approx(0.0, abs=1e-9)
        peaked = np.zeros((1, 101))
        peaked[0, 50] = 100.0
        assert float(two_hot_decode_eval(CODEC, peaked)[0]) == pytest.approx(0.0, abs=1e-9)
        zero = np.log(two_hot_encode(CODEC, np.array([0.0]), dtype=np.float64) + 1e-300)
        assert float(two_hot_decode_eval(CODEC, zero)[0]) == pytest.approx(0.0, abs=1e-9)


def test_adam_zero_gradient_leaves_parameters_and_clip_scales_to_the_limit():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    st_ = adam_init([p], lr=0.1)
    adam_step(st_, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    q = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    st_ = adam_init([q], lr=0.1, beta1=0.0, clip=100.0)
    assert adam_step(st_, [q], [np.array([120.0, 160.0])]) == pytest.approx(200.0)
    assert np.linalg.norm(st_.m[0]) == pytest.approx(100.0)
