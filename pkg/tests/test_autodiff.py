import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck_suite import CASES, TRIALS, run_case
from coresurrogate.autodiff import (Adam, Tape, Tensor, adam_step, load_checkpoint, multi_head_attention, ops,
                                    params_digest, save_checkpoint, scaled_dot_product_attention, split_heads)
from coresurrogate.errors import ConfigError, NonFiniteError, ShapeError


# ---- gradients -------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck(name):
    passed, worst = run_case(name)
    assert passed == TRIALS, f"{name}: worst error/tolerance {worst:.3g}"


def test_gradient_of_sum_of_squares_is_2x():
    x = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.5]])
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        tape.backward(ops.sum(ops.mul(t, t)))
    assert np.array_equal(t.grad, 2 * x)


def test_gradients_accumulate_and_zero_grad_resets():
    tape = Tape()
    w = tape.param("w", np.array([1.0, 2.0]))
    for _ in range(2):
        with tape:
            tape.backward(ops.sum(ops.scale(w, 3.0)))
    assert np.array_equal(w.grad, [6.0, 6.0])
    tape.zero_grad()
    assert np.array_equal(w.grad, [0.0, 0.0])
    assert tape.param("w", np.zeros(2)) is w
    assert tape.parameter_count() == 2


def test_backward_visits_records_in_reverse_order():
    with Tape() as tape:
        x = Tensor(2.0, requires_grad=True)
        y = ops.mul(x, x)
        z = ops.mul(y, x)  # x^3
        tape.backward(z)
    assert [r[0] for r in tape.records][-1] is z
    assert x.grad == pytest.approx(12.0)


def test_backward_needs_scalar_or_seed():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)
        tape.backward(y, seed=np.array([1.0, 0.0, 2.0]))
    assert np.array_equal(x.grad, [2.0, 0.0, 4.0])


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ops.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_non_finite_values_trip_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor([1000.0]))


def test_four_axes_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1)))


# ---- layer norm and softmax ------------------------------------------------------------------

def test_layer_norm_of_constant_vector_is_the_shift():
    beta = np.array([0.1, -0.2, 0.3, 0.0])
    y = ops.layer_norm(Tensor(np.full((2, 4), 7.0)), Tensor(np.ones(4)), Tensor(beta))
    assert np.array_equal(y.data, np.broadcast_to(beta, (2, 4)))


def test_softmax_examples():
    assert np.array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    y = ops.softmax(Tensor([1000.0, 0.0])).data
    assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300


@settings(max_examples=100)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)


# ---- attention ------------------------------------------------------------------------------------

def test_single_key_returns_value():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2, 1, 3))
    out = scaled_dot_product_attention(rng.standard_normal((2, 4, 5)), rng.standard_normal((2, 1, 5)), v)
    assert np.allclose(out.data, np.broadcast_to(v, (2, 4, 3)), rtol=0, atol=1e-15)


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    k = np.repeat(rng.standard_normal((1, 1, 4)), 2, axis=1)
    v = rng.standard_normal((1, 2, 3))
    out = scaled_dot_product_attention(rng.standard_normal((1, 1, 4)), k, v)
    assert np.allclose(out.data[0, 0], v[0].mean(axis=0), rtol=0, atol=1e-15)


def test_attention_matches_direct_formula():
    q = np.array([[[0.3, -1.2], [0.7, 0.4]]])
    k = np.array([[[1.0, 0.5], [-0.2, 0.9]]])
    v = np.array([[[2.0, -1.0], [0.5, 3.0]]])
    out = scaled_dot_product_attention(q, k, v).data
    expect = np.empty((2, 2))
    for i in range(2):
        s = [sum(q[0, i, d] * k[0, j, d] for d in range(2)) / math.sqrt(2) for j in range(2)]
        w = [math.exp(x) / sum(math.exp(y) for y in s) for x in s]
        expect[i] = [sum(w[j] * v[0, j, c] for j in range(2)) for c in range(2)]
    assert np.allclose(out[0], expect, rtol=0, atol=1e-12)


def test_attention_key_width_mismatch():
    with pytest.raises(ShapeError):
        scaled_dot_product_attention(np.ones((1, 2, 3)), np.ones((1, 2, 4)), np.ones((1, 2, 4)))


def test_one_head_identity_projection_reduces_to_attention():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((2, 3, 4)) for _ in range(3))
    eye = np.eye(4)
    out = multi_head_attention(q, k, v, 1, [eye], [eye], [eye], eye).data
    assert np.array_equal(out, scaled_dot_product_attention(q, k, v).data)


def test_multi_head_shape_and_divisibility():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 6))
    w = [rng.standard_normal((6, 2)) for _ in range(3)]
    out = multi_head_attention(x, x, x, 3, w, w, w, rng.standard_normal((6, 6)))
    assert out.shape == (2, 5, 6)
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, 4, w, w, w, np.eye(6))
    with pytest.raises(ConfigError):
        split_heads(np.eye(6), 4)


# ---- optimizer -------------------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    tape = Tape()
    theta = tape.param("theta", np.array(1.0))
    opt = Adam(tape, lr=1e-3)
    with tape:
        tape.backward(ops.scale(ops.square(theta), 0.5))
    adam_step(opt)
    assert theta.data == pytest.approx(1.0 - 1e-3 * 1.0 / (1.0 + 1e-8), rel=1e-15)


def test_adam_identical_gradients_keep_direction():
    tape = Tape()
    theta = tape.param("theta", np.array([0.0]))
    opt = Adam(tape, lr=0.1)
    moves = []
    for _ in range(2):
        before = theta.data.copy()
        tape.zero_grad()
        theta.grad = np.array([0.5])
        tape.backward_calls += 1
        opt.step()
        moves.append(theta.data - before)
    assert moves[0] < 0 and moves[1] < 0


def test_adam_needs_a_backward_first():
    tape = Tape()
    tape.param("w", np.ones(2))
    with pytest.raises(RuntimeError):
        Adam(tape).step()


def test_adam_decreases_a_quadratic():
    tape = Tape()
    w = tape.param("w", np.array([3.0, -2.0]))
    opt = Adam(tape, lr=0.05)
    target = np.array([0.5, 1.0])
    losses = []
    for _ in range(100):
        tape.zero_grad()
        with tape:
            loss = ops.sum(ops.square(ops.sub(w, Tensor(target))))
            tape.backward(loss)
        losses.append(loss.item())
        opt.step()
    assert losses[-1] < 0.01 * losses[0]


def _train(seed, steps=5):
    rng = np.random.default_rng(seed)
    tape = Tape()
    w1 = tape.param("w1", rng.standard_normal((3, 4)))
    w2 = tape.param("w2", rng.standard_normal((4, 1)))
    x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 1))
    opt = Adam(tape)
    for _ in range(steps):
        tape.zero_grad()
        with tape:
            tape.backward(ops.mean(ops.square(ops.sub(ops.matmul(ops.tanh(ops.matmul(Tensor(x), w1)), w2),
                                                      Tensor(y)))))
        opt.step()
    return {k: p.data for k, p in tape.params.items()}


def test_training_is_bitwise_deterministic():
    assert params_digest(_train(4)) == params_digest(_train(4))
    assert params_digest(_train(4)) != params_digest(_train(5))


# ---- checkpoints ----------------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = _train(1)
    save_checkpoint(tmp_path / "m.ckpt", params, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"note": "x"}
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k], params[k])


def test_checkpoint_layout_is_little_endian_with_versioned_header(tmp_path):
    import json
    import struct
    save_checkpoint(tmp_path / "m.ckpt", {"a": np.array([1.5, -2.0])})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    assert header["version"] == 1
    assert header["entries"] == [{"name": "a", "shape": [2], "offset": 0}]
    assert struct.unpack("<2d", raw[8 + n:]) == (1.5, -2.0)


def test_checkpoint_rejects_missing_version(tmp_path):
    import json
    import struct
    header = json.dumps({"entries": []}).encode()
    (tmp_path / "bad.ckpt").write_bytes(struct.pack("<Q", len(header)) + header)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
