import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drrg.errors import ContractError, DimensionError, NumericDomainError
from drrg.numerics import Adam, OptimizerState, Tensor, adam_step, load_tensors, save_tensors
from drrg.numerics import functional as F
from drrg.numerics.tensor import concat, no_grad

from gradcheck import check_tensor_grads


def rand_param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


def projected(out, rng_seed=0):
    # random linear functional keeps gradients O(1) so relative error is meaningful
    r = np.random.default_rng(rng_seed).uniform(-1, 1, size=out.shape)
    return (out * r).sum()


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = Tensor([[1.0, 0.0], [0.0, 1.0]]) @ Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_row_by_column():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand_param(rng, 4, 5), rand_param(rng, 5, 2)
    err = check_tensor_grads(lambda: (a @ b).sum(), [a, b], rng)
    assert err <= 1e-5


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(1)
    a, b = rand_param(rng, 3, 4, 5), rand_param(rng, 5, 2)
    assert check_tensor_grads(lambda: projected(a @ b), [a, b], rng) <= 1e-5
    v = rand_param(rng, 5)
    assert check_tensor_grads(lambda: projected(a @ v), [a, v], rng) <= 1e-5


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# ------------------------------------------------------------ elementwise


def test_softmax_uniform():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_tanh_at_zero():
    x = Tensor([0.0], requires_grad=True)
    y = F.tanh(x)
    y.sum().backward()
    assert y.data[0] == 0.0
    assert x.grad[0] == 1.0


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericDomainError):
        F.softmax(Tensor([0.0, np.nan]))
    with pytest.raises(NumericDomainError):
        F.log(Tensor([0.0, 1.0]))


def test_masked_softmax_zero_row():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = F.softmax(x, mask=np.array([[True, False], [False, False]]))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 9))
def test_softmax_is_a_distribution(seed, rows, cols):
    x = np.random.default_rng(seed).uniform(-30, 30, size=(rows, cols))
    out = F.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


UNARY = {
    "tanh": F.tanh,
    "sigmoid": F.sigmoid,
    "exp": F.exp,
    "softmax": F.softmax,
    "log_softmax": F.log_softmax,
    "relu": F.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(2)
    x = rand_param(rng, 3, 7)
    assert check_tensor_grads(lambda: projected(UNARY[name](x)), [x], rng) <= 1e-5


def test_log_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    assert check_tensor_grads(lambda: projected(F.log(x)), [x], rng) <= 1e-5


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(4)
    a, b = rand_param(rng, 3, 1, 4), rand_param(rng, 5, 1)
    assert check_tensor_grads(lambda: projected(a + b), [a, b], rng) <= 1e-5
    assert check_tensor_grads(lambda: projected(a * b), [a, b], rng) <= 1e-5
    assert check_tensor_grads(lambda: projected(a / (b * b + 1.0)), [a, b], rng) <= 1e-5


def test_masked_softmax_gradient():
    rng = np.random.default_rng(5)
    x = rand_param(rng, 2, 3, 6)
    mask = rng.uniform(size=(2, 1, 6)) > 0.3
    mask[:, :, 0] = True
    assert check_tensor_grads(lambda: projected(F.softmax(x, mask)), [x], rng) <= 1e-5


def test_layer_norm_gradient():
    rng = np.random.default_rng(6)
    x, g, b = rand_param(rng, 2, 3, 8), rand_param(rng, 8), rand_param(rng, 8)
    assert check_tensor_grads(lambda: projected(F.layer_norm(x, g, b)), [x, g, b], rng) <= 1e-5


def test_embedding_gradient_accumulates_repeats():
    rng = np.random.default_rng(7)
    table = rand_param(rng, 6, 4)
    ids = np.array([[1, 2, 1], [5, 1, 0]])
    assert check_tensor_grads(lambda: projected(F.embedding(table, ids)), [table], rng) <= 1e-5


def test_conv2d_gradient():
    rng = np.random.default_rng(8)
    x = rand_param(rng, 1, 1, 6, 6)
    w = rand_param(rng, 2, 1, 3, 3)
    b = rand_param(rng, 2)
    loss = lambda: projected(F.conv2d(x, w, b, stride=1, pad=1))  # noqa: E731
    assert check_tensor_grads(loss, [x, w, b], rng) <= 1e-5
    loss2 = lambda: projected(F.conv2d(x, w, b, stride=2, pad=1))  # noqa: E731
    assert check_tensor_grads(loss2, [x, w, b], rng) <= 1e-5


def test_conv2d_matches_direct_correlation():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,fchw->bf", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_global_avg_pool_gradient():
    rng = np.random.default_rng(10)
    x = rand_param(rng, 2, 3, 4, 4)
    assert check_tensor_grads(lambda: projected(F.global_avg_pool(x)), [x], rng) <= 1e-5


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(11)
    logits = rand_param(rng, 2, 3, 5)
    targets = rng.integers(0, 5, size=(2, 3))
    weights = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
    loss = F.cross_entropy(logits, targets, weights)
    logp = F.log_softmax(Tensor(logits.data)).data
    ref = -sum(logp[b, t, targets[b, t]] for b, t in [(0, 0), (0, 1), (1, 0)]) / 3
    assert abs(loss.item() - ref) < 1e-12
    assert check_tensor_grads(lambda: F.cross_entropy(logits, targets, weights), [logits], rng) <= 1e-5


def test_bce_gradient():
    rng = np.random.default_rng(12)
    x = rand_param(rng, 4, 3)
    t = rng.integers(0, 2, size=(4, 3))
    assert check_tensor_grads(lambda: F.bce_with_logits(x, t), [x], rng) <= 1e-5


def test_scatter_and_gather_gradients():
    rng = np.random.default_rng(13)
    w = rand_param(rng, 2, 3, 4)
    ids = np.array([[0, 2, 2, 5], [1, 1, 1, 1]])
    assert check_tensor_grads(lambda: projected(F.scatter_last(w, ids, 6)), [w], rng) <= 1e-5
    v = rand_param(rng, 2, 3, 6)
    assert check_tensor_grads(lambda: projected(F.gather_last(v, ids)), [v], rng) <= 1e-5


def test_pick_concat_getitem_gradients():
    rng = np.random.default_rng(14)
    x = rand_param(rng, 2, 3, 5)
    idx = rng.integers(0, 5, size=(2, 3))
    assert check_tensor_grads(lambda: projected(F.pick(x, idx)), [x], rng) <= 1e-5
    y = rand_param(rng, 2, 3, 2)
    assert check_tensor_grads(lambda: projected(concat([x, y], axis=-1)), [x, y], rng) <= 1e-5
    assert check_tensor_grads(lambda: projected(x[:, 1:, ::2]), [x], rng) <= 1e-5
    assert check_tensor_grads(lambda: projected(x.transpose(2, 0, 1).reshape(5, 6)), [x], rng) <= 1e-5


# --------------------------------------------------------------- backward


def test_backward_sum():
    w = Tensor(np.zeros(3), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_backward_accumulates_across_calls():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (w * w).sum().backward()
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [4, 8, 12])


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_shared_subexpression_gradient():
    w = Tensor([3.0], requires_grad=True)
    y = w * w
    (y + y * w).sum().backward()  # d/dw (w^2 + w^3) = 2w + 3w^2
    assert w.grad[0] == pytest.approx(6 + 27)


def test_no_grad_builds_no_graph():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad


# ------------------------------------------------------------------- adam


def test_adam_descends_on_square():
    w = Tensor([1.0], requires_grad=True)
    (w * w).sum().backward()
    adam_step([w], 0.1, OptimizerState())
    assert w.data[0] < 1.0
    assert w.grad is None


def test_adam_zero_gradient_is_noop():
    w = Tensor([0.5, -0.3], requires_grad=True)
    w.grad = np.zeros(2)
    adam_step([w], 0.1, OptimizerState())
    np.testing.assert_array_equal(w.data, [0.5, -0.3])


def test_adam_missing_grad():
    with pytest.raises(ContractError):
        adam_step([Tensor([1.0], requires_grad=True)], 0.1, OptimizerState())


def test_adam_quadratic_converges():
    w = Tensor([1.5, -2.0], requires_grad=True)
    scale = np.array([1.0, 3.0])
    opt = Adam([w], lr=0.05)
    for _ in range(200):
        loss = (w * w * scale).sum()
        loss.backward()
        opt.step()
    assert float((w.data**2 * scale).sum()) < 1e-3


# ------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    tensors = {"a.weight": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "ünï": rng.normal(size=(2, 1, 3))}
    path = tmp_path / "ck.drrg"
    save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"DRRG"
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE0000")
    with pytest.raises(ContractError):
        load_tensors(p)
