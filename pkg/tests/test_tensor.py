import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wavestyle import tensor as T
from wavestyle.serialization import TensorFormatError, decode_tensor, encode_tensor, load_tensor, save_tensor
from wavestyle.tensor import ShapeError, Tensor

from conftest import check_grad


def test_add_elementwise():
    assert np.array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])


def test_mul_by_ones_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(T.mul(x, T.ones_like(x)).data, x.data)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x * x).backward()
    assert np.allclose(x.grad, [2, 4, 6])


def test_broadcast_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_broadcast_gradients_reduce_over_broadcast_axes(op, rng):
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (1, 4))
    assert check_grad(lambda x, y: T.tsum(op(x, y) * op(x, y)), [a, b]) < 1e-6


def test_matmul_values():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5], [6]])
    assert np.array_equal(out.data, [[17], [39]])
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(x)).data, x)


def test_matmul_gradient(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert check_grad(lambda x, y: T.tsum(T.matmul(x, y) ** 2), [a, b]) < 1e-6


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_constant_sum():
    c = 1.7
    out = T.conv2d(Tensor(np.full((1, 1, 2, 2), c)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(4 * c)


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    assert np.allclose(T.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_conv_output_size():
    out = T.conv2d(Tensor(np.zeros((1, 2, 7, 9))), Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, 4, 5)


def test_conv_matches_loop_oracle(rng):
    x, w = rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 3, 2))
    got = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (7 - 3) // 2 + 1, (8 - 2) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for b in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[b, o, i, j] = np.sum(xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[o])
    assert np.allclose(got, ref, atol=1e-12)


def test_conv_gradient(rng):
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    assert check_grad(lambda a, b: T.tsum(T.conv2d(a, b, 1, 1) ** 2), [x, w]) < 1e-5


def test_conv_strided_gradient(rng):
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))
    assert check_grad(lambda a, b: T.tsum(T.conv2d(a, b, 2, 1) ** 2), [x, w]) < 1e-5


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.relu(x)
    assert np.array_equal(y.data, [0, 0, 2])
    T.tsum(y).backward()
    assert np.array_equal(x.grad, [0, 0, 1])


def test_log_exp_inverse():
    x = np.linspace(-5, 5, 101)
    assert np.max(np.abs(T.log(T.exp(Tensor(x))).data - x)) < 1e-12


def test_sqrt_gradient_at_four():
    x = Tensor([4.0], requires_grad=True)
    T.tsum(T.sqrt(x)).backward()
    assert x.grad[0] == pytest.approx(0.25)


def test_log_nonpositive_names_index():
    with pytest.raises(ValueError, match=r"\(1,\)"):
        T.log(Tensor([1.0, 0.0, 2.0]))


def test_softmax_cases():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    s = T.softmax(Tensor([1000.0, 1000.5])).data
    assert np.all(np.isfinite(s)) and abs(s.sum() - 1) < 1e-9


def test_mean_reduces_axis():
    out = T.mean(Tensor(np.ones((2, 3))), axis=1)
    assert np.array_equal(out.data, np.ones(2))


def test_bad_axis():
    with pytest.raises(ValueError):
        T.tsum(Tensor(np.ones((2, 3))), axis=2)


@pytest.mark.parametrize("fn", [
    lambda x: T.tsum(T.exp(x) * x),
    lambda x: T.tsum(T.log(x * x + 1.0)),
    lambda x: T.tsum(T.sqrt(x * x + 0.5)),
    lambda x: T.tsum(T.softmax(x, axis=1) * T.softmax(x, axis=0)),
    lambda x: T.tsum(T.log_softmax(x, axis=1) ** 2),
    lambda x: T.tsum(T.mean(x, axis=0) ** 2),
    lambda x: T.tsum(T.transpose(x) @ x),
    lambda x: T.tsum(T.concat([x, x * 2.0], axis=1) ** 2),
    lambda x: T.tsum(x[1:, ::2] ** 3),
])
def test_unary_gradients(fn, rng):
    assert check_grad(fn, [rng.standard_normal((3, 4))]) < 1e-6


def test_max_pool_and_batch_norm_gradients(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    g, b = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
    weights = rng.standard_normal((3, 2, 2, 2))

    def f(xx, gg, bb):
        h, _, _ = T.batch_norm(xx, gg, bb, 1e-5)
        return T.tsum(T.max_pool2d(T.relu(h)) * Tensor(weights))

    assert check_grad(f, [x, g, b]) < 1e-5


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.tsum(x * x).backward()
    first = x.grad.copy()
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, 2 * first)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_shared_subexpression_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    T.tsum(y + y * x).backward()
    assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_is_deterministic(rng):
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=4),
                  elements=st.floats(-3, 3)))
def test_broadcast_row_gradient_is_column_sum(a):
    row = Tensor(np.ones((1, a.shape[1])), requires_grad=True)
    T.tsum(Tensor(a) * row).backward()
    assert np.allclose(row.grad, a.sum(axis=0, keepdims=True))


# -- WSTN files ----------------------------------------------------------------

def test_wstn_roundtrip(tmp_path, rng):
    arr = rng.standard_normal((2, 3, 4))
    save_tensor(tmp_path / "a.wstn", arr)
    back = load_tensor(tmp_path / "a.wstn")
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_wstn_layout():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"WSTN" and blob[4] == 1 and blob[5] == 2
    assert blob[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(blob[14:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_wstn_rejects_garbage():
    with pytest.raises(TensorFormatError):
        decode_tensor(b"NOPE\x01\x00")
    with pytest.raises(TensorFormatError):
        decode_tensor(encode_tensor(np.ones(3))[:-8])
