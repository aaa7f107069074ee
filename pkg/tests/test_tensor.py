import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikebench import functional as F
from spikebench.errors import DimensionError, GraphError, NumericError
from spikebench.gradcheck import grad_check, numerical_grad
from spikebench.nn import BatchNorm, Linear
from spikebench.tensor import Tensor, matmul, no_grad, record_ops, stack

SEEDS = range(10)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))


def test_matmul_hand_case():
    a = Tensor([[1, 1], [1, 0]])
    b = Tensor([[1, 0], [1, 1]])
    np.testing.assert_array_equal(matmul(a, b).data, [[2, 1], [1, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(3, 3)))
    assert grad_check(lambda a: matmul(a, b).sum(), rng.normal(size=(3, 3))) < 1e-4
    a = Tensor(rng.normal(size=(2, 4, 3)))
    assert grad_check(lambda w: (matmul(a, w) ** 2).sum(), rng.normal(size=(3, 5))) < 1e-4


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    w[np.arange(3), np.arange(3)] = 1
    np.testing.assert_array_equal(F.conv(Tensor(x), Tensor(w)).data, x)


def test_conv1d_hand_case():
    out = F.conv(Tensor([[[1, 2, 3, 4]]]), Tensor([[[1, 1]]]), dims=1)
    np.testing.assert_array_equal(out.data, [[[3, 5, 7]]])


def test_depthwise_conv_never_mixes_channels():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6))
    x[:, 0] = 0
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    out = F.conv(Tensor(x), w, padding=1, groups=2)
    assert np.all(out.data[:, 0] == 0)
    assert np.any(out.data[:, 1] != 0)


def test_conv_output_extent_formula():
    x = Tensor(np.zeros((1, 1, 11, 9)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    out = F.conv(x, w, stride=2, padding=1)
    assert out.shape == (1, 1, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        F.conv(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dims,stride,padding,groups", [(2, 1, 1, 1), (2, 2, 0, 1), (2, 1, 1, 2), (1, 2, 1, 1), (1, 1, 1, 4)])
def test_conv_gradients(seed, dims, stride, padding, groups):
    rng = np.random.default_rng(seed)
    spatial = (5, 6) if dims == 2 else (7,)
    x0 = rng.normal(size=(2, 4) + spatial)
    w0 = rng.normal(size=(4, 4 // groups) + (3,) * dims)
    probe = rng.normal(size=F.conv(Tensor(x0), Tensor(w0), stride, padding, dims, groups).shape)
    wt = Tensor(w0)
    assert grad_check(lambda x: (F.conv(x, wt, stride, padding, dims, groups) * probe).sum(), x0) < 1e-4
    xt = Tensor(x0)
    assert grad_check(lambda w: (F.conv(xt, w, stride, padding, dims, groups) * probe).sum(), w0) < 1e-4


def test_batch_norm_constant_channel_gives_shift():
    bn = BatchNorm(2)
    bn.bias.data[:] = [0.25, -3.0]
    x = Tensor(np.full((4, 2, 3), 7.0, dtype=np.float32))
    out = bn(x).data
    np.testing.assert_allclose(out[:, 0], 0.25)
    np.testing.assert_allclose(out[:, 1], -3.0)


def test_batch_norm_unit_variance_preserved():
    bn = BatchNorm(1)
    out = bn(Tensor([[-1.0], [1.0]])).data.ravel()
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_batch_norm_running_stats_and_eval_determinism():
    bn = BatchNorm(3)
    x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, size=(64, 3)).astype(np.float32))
    bn(x)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.data.mean(axis=0), rtol=1e-5)
    bn.eval()
    a, b = bn(x).data, bn(x).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3, axis=-1)
    bn.weight.data[:] = rng.uniform(0.5, 1.5, 3)
    probe = rng.normal(size=(5, 4, 3))
    assert grad_check(lambda x: (bn(x) * probe).sum(), rng.normal(size=(5, 4, 3))) < 1e-4
    bn.eval()
    assert grad_check(lambda x: (bn(x) * probe).sum(), rng.normal(size=(5, 4, 3))) < 1e-4


def test_max_pool_values_and_gradient():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = F.max_pool(Tensor(x), 2)
    np.testing.assert_array_equal(out.data, [[[[5, 7], [13, 15]]]])
    rng = np.random.default_rng(3)
    probe = rng.normal(size=(2, 3, 2, 3))
    assert grad_check(lambda t: (F.max_pool(t, 2) * probe).sum(), rng.normal(size=(2, 3, 4, 6))) < 1e-4
    assert grad_check(lambda t: (F.max_pool(t, 4, dims=1) ** 2).sum(), rng.normal(size=(2, 3, 8))) < 1e-4


def test_max_pool_indivisible():
    with pytest.raises(DimensionError):
        F.max_pool(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_grad_check_square():
    assert grad_check(lambda x: (x * x).sum(), np.array([3.0])) < 1e-6
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_grad_check_constant_function():
    assert grad_check(lambda x: Tensor(np.array(2.5)), np.ones(3)) == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_matmul_bn_chain(seed):
    rng = np.random.default_rng(seed)
    l1, l2 = Linear(4, 6, rng), Linear(6, 3, rng)
    bn = BatchNorm(6, axis=-1)
    f = lambda x: (l2(bn(l1(x)).tanh()) ** 2).sum()
    assert grad_check(f, rng.normal(size=(8, 4))) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_non_finite_op():
    with pytest.raises(NumericError, match="log"):
        grad_check(lambda x: (x * 0.0).log().sum(), np.ones(2))


def test_cross_entropy_uniform_logits():
    loss = F.cross_entropy(Tensor(np.zeros((4, 2))), [0, 1, 1, 0])
    assert loss.item() == pytest.approx(np.log(2), abs=1e-6)
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, size=6)
    assert grad_check(lambda z: F.cross_entropy(z, y), rng.normal(size=(6, 5))) < 1e-4


def test_backward_twice_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_backward_traverses_reverse_execution_order():
    x = Tensor([2.0], requires_grad=True)
    order = []
    from spikebench.tensor import make_op

    def tag(t, name):
        return make_op(t.data.copy(), (t,), lambda g: (order.append(name) or g,), name)

    a = tag(x, "first")
    b = tag(a * 2.0, "second")
    c = tag(b + a, "third")
    c.sum().backward()
    assert order == ["third", "second", "first"]
    assert x.grad[0] == 3.0


def test_backward_is_additive():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 3))
    w = Tensor(rng.normal(size=(3, 3)))
    f = lambda x: (matmul(x, w).tanh()).sum()
    g = lambda x: (x * x).mean()
    xa = Tensor(x0, requires_grad=True)
    (f(xa) + g(xa)).backward()
    xb = Tensor(x0, requires_grad=True)
    f(xb).backward()
    g(xb).backward()
    np.testing.assert_allclose(xa.grad, xb.grad, rtol=1e-12)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_record_ops_and_stack_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with record_ops() as log:
        s = stack([a, a * 3.0], axis=0)
    assert [op for op, _ in log] == ["mul", "stack"]
    s.sum().backward()
    np.testing.assert_array_equal(a.grad, [4.0, 4.0])


def test_getitem_gradient_accumulates_repeats():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    a[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).dtype == np.float32
    assert (Tensor([1.0]) * 0.5).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(0, 2**31 - 1))
def test_ops_are_deterministic_and_finite(values, seed):
    rng = np.random.default_rng(seed)
    x = np.array(values, dtype=np.float32).reshape(1, 1, -1)
    w = rng.normal(size=(2, 1, 1)).astype(np.float32)
    runs = [F.conv(Tensor(x), Tensor(w), dims=1).sigmoid().data for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()
    assert np.all(np.isfinite(runs[0]))


def test_numerical_grad_helper():
    g = numerical_grad(lambda x: (x ** 3).sum(), np.array([2.0]))
    assert g[0] == pytest.approx(12.0, rel=1e-6)
