import numpy as np
import pytest

from conftest import naive_conv2d
from drebnet.checks import _primitive_cases
from drebnet.engine import (
    EngineError,
    OptimState,
    Tensor,
    backward,
    count_flops,
    current_tape,
    grad_check,
    no_grad,
    ops,
    optimizer_step,
)
from drebnet.engine import dump
from drebnet.engine.nn import BatchNorm2d, Conv2d
from drebnet.engine.optim import sgd_state


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ conv2d

def test_conv2d_single_multiply_add(f64):
    out = ops.conv2d(Tensor([[[[5.0]]]]), Tensor([[[[2.0]]]]), Tensor([1.0]))
    assert out.data.tolist() == [[[[11.0]]]]


def test_conv2d_identity_kernel(f64, rng):
    x = rng.standard_normal((2, 1, 5, 6))
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)])
def test_conv2d_matches_loop_reference(f64, rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 4, 4) if k < 5 else (1, 2, 5, 6))
    w = rng.standard_normal((3, x.shape[1], k, k))
    b = rng.standard_normal(3)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    assert np.max(np.abs(got - naive_conv2d(x, w, b, stride, pad))) < 1e-6


def test_conv2d_chw_input(f64, rng):
    x = rng.standard_normal((3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    got = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.allclose(got, naive_conv2d(x[None], w, None, 1, 1)[0], atol=1e-12)


def test_conv2d_errors(f64):
    with pytest.raises(EngineError, match="channel mismatch"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))
    with pytest.raises(EngineError, match="larger than padded input"):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -------------------------------------------------------------- batch norm

def test_batch_norm_constant_channels_give_zero(f64):
    x = np.broadcast_to(np.array([3.0, -7.0])[None, :, None, None], (4, 2, 3, 3)).copy()
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, True)
    assert np.array_equal(out.data, np.zeros_like(x))


def test_batch_norm_zero_gamma_gives_beta(f64, rng):
    out = ops.batch_norm(Tensor(rng.standard_normal((4, 2, 3, 3))), Tensor(np.zeros(2)),
                         Tensor(np.array([0.5, -2.0])), None, None, True)
    assert np.array_equal(out.data[:, 0], np.full((4, 3, 3), 0.5))
    assert np.array_equal(out.data[:, 1], np.full((4, 3, 3), -2.0))


def test_batch_norm_output_moments(f64, rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 5 + 2
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)


def test_batch_norm_running_stats_and_eval(f64, rng):
    bn = BatchNorm2d(2)
    x = rng.standard_normal((4, 2, 3, 3)) + 1.0
    bn(Tensor(x))
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(bn.running_mean, 0.1 * mean)
    assert np.allclose(bn.running_var, 0.9 + 0.1 * var)
    bn.eval()
    out = bn(Tensor(x)).data
    ref = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
    assert np.allclose(out, ref)


def test_batch_norm_single_value_per_channel_errors(f64):
    with pytest.raises(EngineError):
        ops.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, True)


# -------------------------------------------------------------- pointwise

def test_relu_and_sigmoid_values(f64):
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ops.sigmoid(Tensor([0.0])).data.tolist() == [0.5]
    s = ops.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s))


def test_sigmoid_gradient_at_zero(f64):
    x = leaf([0.0])
    backward(ops.sum(ops.sigmoid(x)))
    assert x.grad[0] == 0.25
    h = 1e-5
    num = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert abs(x.grad[0] - num) < 1e-8


def test_pointwise_dispatch(f64):
    x = Tensor([-1.0, 3.0])
    assert np.array_equal(ops.pointwise(x, "relu").data, ops.relu(x).data)
    with pytest.raises(ValueError):
        ops.pointwise(x, "tanh")


# ---------------------------------------------------------------- pooling

def test_adaptive_avg_pool_values_and_grad(f64):
    assert ops.adaptive_avg_pool(Tensor(np.full((2, 3, 3), 4.0))).data.ravel().tolist() == [4.0, 4.0]
    assert ops.adaptive_avg_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 2.5
    x = leaf(np.arange(12.0).reshape(1, 3, 4))
    backward(ops.sum(ops.adaptive_avg_pool(x)))
    assert np.allclose(x.grad, 1 / 12)


# --------------------------------------------------------------- upsample

def test_nearest_upsample_replicates(f64):
    out = ops.upsample2x(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), "nearest").data[0]
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_transposed_upsample_zero_weight(f64, rng):
    out = ops.upsample2x(Tensor(rng.standard_normal((2, 3, 3))), "transposed_conv",
                         Tensor(np.zeros((2, 2, 4, 4))))
    assert out.shape == (2, 6, 6)
    assert not out.data.any()


def test_transposed_conv_is_conv_adjoint(f64, rng):
    # <conv(x), y> == <x, conv_transpose(y)> with the same kernel
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((5, 3, 4, 4))
    y = rng.standard_normal((2, 5, 4, 4))
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data)
    assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))


def test_upsample_bad_weight(f64):
    with pytest.raises(EngineError):
        ops.upsample2x(Tensor(np.zeros((1, 2, 2))), "transposed_conv", Tensor(np.zeros((1, 1, 3, 3))))


# ------------------------------------------------------ adjoint identities

def _jvp(fn, arrays, dirs, h=1e-4):
    def at(t):
        return fn(*[Tensor(a + t * d) for a, d in zip(arrays, dirs)]).data
    return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)


@pytest.mark.parametrize("case", list(_primitive_cases(np.random.default_rng(0))), ids=lambda c: c[0])
def test_primitive_adjoint_identity(f64, case):
    # <J dx, dy> == <dx, J^T dy>, J dx from a fourth-order directional difference
    name, fn, arrays = case
    r = np.random.default_rng(7)
    if name == "clamp" or name == "relu" or name == "abs":
        arrays = [a + np.sign(a) * 0.05 for a in arrays]  # keep probes off the kinks
    leaves = [leaf(a) for a in arrays]
    y = fn(*leaves)
    dy = r.standard_normal(y.shape)
    backward(ops.sum(y * Tensor(dy)))
    dirs = [r.standard_normal(a.shape) for a in arrays]
    lhs = float(np.sum(_jvp(fn, arrays, dirs) * dy))
    rhs = float(sum(np.sum(d * lf.grad) for d, lf in zip(dirs, leaves)))
    assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- backward

def test_backward_linear_and_quadratic(f64, rng):
    a = rng.standard_normal((3, 4))
    x = leaf(a)
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones_like(a))
    x = leaf(a)
    backward(ops.sum(x * x))
    assert np.array_equal(x.grad, 2 * a)


def test_backward_errors(f64):
    x = leaf([1.0, 2.0])
    with pytest.raises(EngineError, match="scalar"):
        backward(x * 2.0)
    loss = ops.sum(x * x)
    backward(loss)
    with pytest.raises(EngineError, match="tape"):
        backward(loss)


def test_gradient_accumulates_exactly(f64, rng):
    a = rng.standard_normal(5)
    x = leaf(a)
    backward(ops.sum(ops.sin(x)))
    once = x.grad.copy()
    x = leaf(a)
    backward(ops.sum(ops.sin(x)) + ops.sum(ops.sin(x)))
    assert np.array_equal(x.grad, 2 * once)


def test_tape_order_and_no_grad(f64):
    x = leaf([1.0])
    y = ops.exp(x)
    z = ops.sin(y)
    nodes = current_tape().nodes
    assert [n.op for n in nodes] == ["exp", "sin"]
    assert y.node_id < z.node_id
    with no_grad():
        w = ops.cos(x)
    assert w.node is None and not w.requires_grad


def test_determinism(f64):
    def run():
        r = np.random.default_rng(5)
        conv = Conv2d(3, 4, 3, r)
        return ops.relu(conv(Tensor(r.standard_normal((2, 3, 8, 8))))).data
    assert np.array_equal(run(), run())


# --------------------------------------------------------------- optimizer

def test_sgd_single_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    optimizer_step([p], sgd_state(0.1))
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    assert p.grad is None


def test_linear_schedule_endpoint():
    st = sgd_state(0.5, schedule="linear", total_steps=10, step=10)
    assert st.effective_lr() == 0.0
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([3.0])
    optimizer_step([p], st)
    assert p.data[0] == 2.0
    assert sgd_state(1.0, schedule="linear", total_steps=4).effective_lr(1) == 0.75


def test_sgd_converges_on_quadratic(f64):
    p = Tensor(np.array([0.0]), requires_grad=True)
    st = sgd_state(0.1)
    for _ in range(200):
        backward(ops.sum((p - 3.0) * (p - 3.0)))
        optimizer_step([p], st)
    assert abs(p.data[0] - 3) < 1e-3


def test_adam_first_step_moves_by_lr():
    # bias-corrected Adam moves each coordinate by ~lr * sign(g) on step one
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.3, -5.0])
    optimizer_step({"p": p}, OptimState(learning_rate=0.01))
    assert np.allclose(p.data, [0.99, -0.99], atol=1e-8)


def test_optimizer_missing_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(EngineError, match="no gradient"):
        optimizer_step([p], sgd_state(0.1))
    with pytest.raises(ValueError):
        OptimState(learning_rate=-1.0)


# -------------------------------------------------------------- grad_check

def test_grad_check_quadratic(f64, rng):
    x = leaf(rng.standard_normal(6))
    assert grad_check(lambda: ops.sum(x * x * 3.0 + x), [x]) < 1e-8


def test_grad_check_conv_bn_relu_stack(f64, rng):
    x = Tensor(rng.standard_normal((3, 2, 5, 5)))
    w = leaf(rng.standard_normal((4, 2, 3, 3)))
    g, b = leaf(1 + 0.1 * rng.standard_normal(4)), leaf(0.1 * rng.standard_normal(4))
    proj = Tensor(rng.standard_normal((3, 4, 5, 5)))

    def loss():
        y = ops.batch_norm(ops.conv2d(x, w, padding=1), g, b, None, None, True)
        return ops.sum(ops.sigmoid(y) * proj)

    assert grad_check(loss, [w, g, b]) < 1e-4


def test_grad_check_errors(f64):
    x = leaf([1.0])
    with pytest.raises(EngineError, match="non-finite"), np.errstate(divide="ignore"):
        grad_check(lambda: ops.sum(ops.log(x - 1.0)), [x])
    with pytest.raises(ValueError):
        grad_check(lambda: ops.sum(x), [x], eps=0.0)
    y = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(EngineError, match="float64"):
        grad_check(lambda: ops.sum(y), [y])


# -------------------------------------------------------------- flops/dump

def test_flop_count_closed_form(f64):
    with count_flops() as fc:
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 1, 1))), Tensor(np.zeros(3)))
    assert fc["conv"] == 96 and fc["bias"] == 48


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_dump_round_trip(tmp_path, rng, dtype):
    a = rng.standard_normal((2, 3, 4)).astype(dtype)
    dump.save(tmp_path / "t.drbt", a)
    b = dump.load(tmp_path / "t.drbt")
    assert b.dtype == dtype and np.array_equal(a, b)
    raw = (tmp_path / "t.drbt").read_bytes()
    assert raw[:4] == b"DRBT"
    with pytest.raises(ValueError):
        dump.loads(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        dump.loads(raw[:-1])
