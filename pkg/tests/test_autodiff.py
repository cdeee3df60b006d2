import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pprobe import autodiff as ad
from pprobe.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward values

def test_matmul_forward():
    out = ad.primitive_forward("matmul", [Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]])])
    assert out.values.tolist() == [[3], [7]]


def test_log_softmax_symmetric():
    out = ad.log_softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.values, [-math.log(2)] * 2, atol=1e-12)


def test_tanh_zero():
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_op_record_and_leaf():
    a = leaf([1.0, 2.0])
    b = ad.tanh(a)
    assert a.is_leaf and a.op_record is None
    assert b.op_record.kind == "tanh" and b.op_record.input_ids == (a.id,)
    assert int(np.prod(b.shape)) == b.values.size


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with ad.no_grad():
        b = ad.tanh(a)
    assert not b.requires_grad and b.op_record is None


# ---------------------------------------------------------------- grad multiply

def test_grad_multiply_forward_identity():
    x = leaf([1.5, -2.0])
    y = ad.grad_multiply(x, 0.05)
    assert y.values.tobytes() == x.values.tobytes()


@pytest.mark.parametrize("factor,expected", [(0.05, 0.1), (-0.05, -0.1), (0.0, 0.0)])
def test_grad_multiply_backward(factor, expected):
    x = leaf(3.0)
    loss = ad.scale(ad.grad_multiply(x, factor), 2.0)  # upstream gradient 2.0
    assert ad.backward(loss)[x.id] == pytest.approx(expected, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)),
       st.floats(-1, 1, allow_nan=False))
def test_grad_multiply_scales_path_gradient(x, factor):
    a = leaf(x)
    with_gm = ad.backward(ad.sum_(ad.tanh(ad.grad_multiply(a, factor))))[a.id]
    b = leaf(x)
    plain = ad.backward(ad.sum_(ad.tanh(b)))[b.id]
    assert np.array_equal(ad.grad_multiply(a, factor).values, a.values)
    assert np.allclose(with_gm, factor * plain, rtol=1e-12, atol=1e-300)


def test_grad_multiply_only_affects_its_path():
    x = leaf([0.3, -0.7])
    direct = ad.sum_(ad.mul(x, x))
    through = ad.sum_(ad.tanh(ad.grad_multiply(x, -0.5)))
    g = ad.backward(ad.add(direct, through))[x.id]
    expected = 2 * x.values - 0.5 * (1 - np.tanh(x.values) ** 2)
    assert np.allclose(g, expected, atol=1e-14)


# -------------------------------------------------------------------- backward

def test_backward_square():
    x = leaf([3.0])
    assert ad.backward(ad.sum_(ad.mul(x, x)))[x.id].tolist() == [6.0]


def test_backward_tanh_matches_finite_difference():
    x = leaf(0.5)
    g = ad.backward(ad.tanh(x))[x.id]
    h = 1e-5
    fd = (math.tanh(0.5 + h) - math.tanh(0.5 - h)) / (2 * h)
    assert g == pytest.approx(fd, abs=1e-9)
    assert g == pytest.approx(0.786448, abs=1e-6)


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(ad.tanh(leaf([1.0, 2.0])))


def test_no_gradient_for_constants():
    x = leaf([1.0])
    c = Tensor([2.0])
    grads = ad.backward(ad.sum_(ad.mul(x, c)))
    assert c.id not in grads and set(grads) == {x.id}


def test_backward_is_pure():
    rng = np.random.default_rng(0)
    w = leaf(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(2, 3)))
    loss = ad.nll(ad.log_softmax(ad.tanh(x @ w)), [1, 3])
    g1 = ad.backward(loss)
    g2 = ad.backward(loss)
    assert g1.keys() == g2.keys()
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_gradient_accumulates_over_paths():
    x = leaf(2.0)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))
    assert ad.backward(y)[x.id] == pytest.approx(7.0)


# ------------------------------------------------------------ gradient checks

RNG = np.random.default_rng(42)
LS_WEIGHT = Tensor(RNG.normal(size=(2, 4)))

PRIMITIVE_CASES = {
    "add": (lambda t: ad.sum_(ad.mul(ad.add(t[0], t[1]), t[0])), [RNG.normal(size=(2, 3)), RNG.normal(size=(3,))]),
    "sub": (lambda t: ad.sum_(ad.mul(ad.sub(t[0], t[1]), t[0])), [RNG.normal(size=(2, 3)), RNG.normal(size=(1, 3))]),
    "mul": (lambda t: ad.sum_(ad.mul(t[0], t[1])), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 1))]),
    "scale": (lambda t: ad.sum_(ad.tanh(ad.scale(t[0], -1.7))), [RNG.normal(size=(4,))]),
    "matmul": (lambda t: ad.sum_(ad.tanh(t[0] @ t[1])), [RNG.normal(size=(2, 3)), RNG.normal(size=(3, 2))]),
    "matmul_batched": (lambda t: ad.sum_(ad.tanh(t[0] @ t[1])), [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 2))]),
    "concat": (lambda t: ad.sum_(ad.tanh(ad.concat([t[0], t[1]], axis=1))), [RNG.normal(size=(2, 2)), RNG.normal(size=(2, 3))]),
    "slice": (lambda t: ad.sum_(ad.tanh(t[0][:, 1:3])), [RNG.normal(size=(3, 4))]),
    "embedding": (lambda t: ad.sum_(ad.tanh(ad.embedding(t[0], [[0, 2], [2, 2]]))), [RNG.normal(size=(3, 2))]),
    "tanh": (lambda t: ad.sum_(ad.tanh(t[0])), [RNG.normal(size=(5,))]),
    "sigmoid": (lambda t: ad.sum_(ad.sigmoid(t[0])), [RNG.normal(size=(5,))]),
    "exp": (lambda t: ad.sum_(ad.exp(t[0])), [RNG.normal(size=(5,))]),
    "log_softmax": (lambda t: ad.sum_(ad.mul(ad.log_softmax(t[0]), LS_WEIGHT)), [RNG.normal(size=(2, 4))]),
    "nll": (lambda t: ad.nll(ad.log_softmax(t[0]), [[1, 0], [3, 2]], [[True, True], [True, False]]), [RNG.normal(size=(2, 2, 4))]),
    "mean": (lambda t: ad.mean(ad.mul(t[0], t[0]), axis=0)[1], [RNG.normal(size=(3, 2))]),
    "sum_axis": (lambda t: ad.sum_(ad.tanh(ad.sum_(t[0], axis=1))), [RNG.normal(size=(3, 2))]),
    "reshape": (lambda t: ad.sum_(ad.tanh(ad.reshape(t[0], (3, 2))) @ Tensor(np.arange(2.0).reshape(2, 1))), [RNG.normal(size=(2, 3))]),
    "stack": (lambda t: ad.sum_(ad.tanh(ad.stack([t[0], t[1]], axis=1)) @ Tensor(np.ones((3, 1)))), [RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))]),
    "relu": (lambda t: ad.sum_(ad.relu(t[0])), [np.array([0.5, -0.7, 1.2])]),
    "grad_multiply": (lambda t: ad.sum_(ad.tanh(ad.grad_multiply(t[0], 1.0))), [RNG.normal(size=(3,))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    fn, inputs = PRIMITIVE_CASES[name]
    assert ad.check_gradients(fn, inputs, 1e-5) < 1e-6


def test_check_gradients_sigmoid():
    assert ad.check_gradients(lambda t: ad.sigmoid(t[0]), [0.3], 1e-5) < 1e-6


def test_check_gradients_linear_map_exact():
    w = Tensor(np.array([[2.0], [-3.0]]))
    err = ad.check_gradients(lambda t: ad.sum_(t[0] @ w), [RNG.normal(size=(1, 2))], 1e-3)
    assert err < 1e-10


def test_check_gradients_cross_entropy_chain():
    def fn(t):
        hidden = ad.tanh(t[0] @ t[1])
        return ad.nll(ad.log_softmax(hidden @ t[2]), [0, 2, 1])

    rng = np.random.default_rng(7)
    inputs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]
    assert ad.check_gradients(fn, inputs, 1e-5) < 1e-4


def test_check_gradients_detects_wrong_gradient():
    bogus = lambda t: ad._make("bogus", t[0].data ** 2, (t[0],), lambda g: (g * 3.0,))  # noqa: E731
    assert ad.check_gradients(lambda t: ad.sum_(bogus(t)), [np.array([1.0])], 1e-5) > 0.1


def test_check_gradients_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.check_gradients(lambda t: ad.sum_(t[0]), [1.0], 0.0)


# -------------------------------------------------------------------- optimizer

def test_sgd_step():
    p = leaf(1.0)
    ad.optimizer_step(ad.OptimizerState("sgd", 0.1), [p], {p.id: np.array(0.5)})
    assert p.item() == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_gradient_is_fixed_point():
    p = leaf([1.0, -2.0])
    ad.optimizer_step(ad.OptimizerState("sgd", 0.1), [p], {p.id: np.zeros(2)})
    assert p.values.tolist() == [1.0, -2.0]


def test_adam_first_step():
    # m_hat = g and v_hat = g**2 at t=1, so the update is lr * g / (|g| + eps)
    p = leaf(1.0)
    state = ad.OptimizerState("adam", 0.1)
    ad.optimizer_step(state, [p], {p.id: np.array(1.0)})
    assert p.item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert state.step == 1 and state.m[p.id].shape == p.shape


def test_optimizer_missing_gradient_names_parameter():
    p = Tensor([1.0], requires_grad=True, name="encoder.w")
    with pytest.raises(KeyError, match="encoder.w"):
        ad.optimizer_step(ad.OptimizerState("sgd", 0.1), [p], {})


def test_optimizer_rejects_bad_config():
    with pytest.raises(ValueError):
        ad.OptimizerState("rmsprop", 0.1)
    with pytest.raises(ValueError):
        ad.OptimizerState("sgd", 0.0)


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"encoder.lstm0.w_ih": rng.normal(size=(3, 8)), "decoder.out.b": rng.normal(size=(5,)),
               "scalar": np.array(2.5)}
    path = tmp_path / "m.ppck"
    ad.save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"PPCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3
    back = ad.load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.allclose(back[k], tensors[k].astype(np.float32), atol=0)


def test_checkpoint_layout_by_hand(tmp_path):
    path = tmp_path / "one.ppck"
    ad.save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    expected = (b"PPCK" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (1).to_bytes(2, "little") + b"w" + bytes([2])
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert path.read_bytes() == expected


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ppck"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="PPCK"):
        ad.load_checkpoint(path)
