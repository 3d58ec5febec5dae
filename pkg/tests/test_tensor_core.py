import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import rng
from modalrep import tensor_core as tc
from modalrep.tensor_core import ContractError, GradTape, ShapeError, Tensor


def fd_check(make_loss, tensors: dict[str, Tensor], tol: float = 1e-3,
             eps: float = 1e-5):
    """Analytic gradients vs central finite differences for every tensor."""
    with GradTape() as tape:
        loss = make_loss()
    grads = tc.backward(loss, tape)
    for name, t in tensors.items():
        fd = tc.finite_diff_grad(lambda _x: make_loss(), t, eps=eps)
        assert name in grads, f"no gradient for {name}"
        err = oracles.max_rel_err(grads[name].data, fd.data)
        assert err <= tol, f"{name}: rel err {err:.2e} > {tol}"


def named(r, shape, name):
    return Tensor(r.standard_normal(shape), dtype="float64", trainable=True, name=name)


# ---------------------------------------------------------------------------
# Tensor type


@given(st.lists(st.integers(min_value=1, max_value=5), min_size=0, max_size=4))
def test_data_length_matches_shape(shape):
    t = tc.zeros(tuple(shape))
    assert t.data.size == int(np.prod(shape)) == t.size
    assert t.data.flags["C_CONTIGUOUS"]


def test_finiteness_is_queryable_not_silent():
    t = Tensor([1.0, np.inf])
    assert not t.is_finite()
    assert Tensor([[0.0, -3.5]]).is_finite()


def test_bad_dtype_rejected():
    with pytest.raises(ContractError):
        Tensor([1.0], dtype="int32")


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = tc.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_case():
    out = tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    r = rng(10)
    a = r.standard_normal((4, 5))
    b = r.standard_normal((5, 3))
    got = tc.matmul(Tensor(a, dtype="float64"), Tensor(b, dtype="float64")).data
    assert oracles.max_rel_err(got, oracles.matmul_3loop(a, b)) <= 1e-6


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_matmul_matches_oracle_property(m, k, n, seed):
    r = rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    got = tc.matmul(Tensor(a, dtype="float64"), Tensor(b, dtype="float64")).data
    assert oracles.max_rel_err(got, oracles.matmul_3loop(a, b)) <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_batched_broadcast():
    r = rng(3)
    a = r.standard_normal((2, 3, 4, 5))
    b = r.standard_normal((2, 3, 5, 6))
    got = tc.matmul(Tensor(a, dtype="float64"), Tensor(b, dtype="float64")).data
    for i in range(2):
        for j in range(3):
            ref = oracles.matmul_3loop(a[i, j], b[i, j])
            assert oracles.max_rel_err(got[i, j], ref) <= 1e-6


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    r = rng(0)
    x = Tensor(r.standard_normal((1, 1, 5, 5)), dtype="float32")
    k = Tensor(np.ones((1, 1, 1, 1)), dtype="float32")
    out = tc.conv2d(x, k, tc.zeros((1,)))
    assert np.array_equal(out.data, x.data)


def test_conv2d_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = tc.conv2d(x, k, Tensor(np.zeros(1)), stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 9.0


def test_conv2d_strided_padded_vs_direct():
    r = rng(42)
    x = r.standard_normal((2, 3, 8, 8))
    k = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    got = tc.conv2d(Tensor(x, dtype="float64"), Tensor(k, dtype="float64"),
                    Tensor(b, dtype="float64"), stride=2, padding=1).data
    ref = oracles.conv2d_direct(x, k, b, stride=2, padding=1)
    assert got.shape == ref.shape == (2, 4, 4, 4)
    assert oracles.max_rel_err(got, ref) <= 1e-5


@given(st.integers(0, 500), st.integers(1, 2), st.integers(1, 3),
       st.integers(0, 2), st.integers(1, 2))
@settings(max_examples=25, deadline=None)
def test_conv2d_matches_direct_property(seed, stride, k, padding, cin):
    r = rng(seed)
    h = int(r.integers(k, 7))
    x = r.standard_normal((1, cin, h, h))
    ker = r.standard_normal((2, cin, k, k))
    b = r.standard_normal(2)
    got = tc.conv2d(Tensor(x, dtype="float64"), Tensor(ker, dtype="float64"),
                    Tensor(b, dtype="float64"), stride=stride, padding=padding).data
    ref = oracles.conv2d_direct(x, ker, b, stride=stride, padding=padding)
    assert oracles.max_rel_err(got, ref) <= 1e-5


def test_conv2d_error_cases():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    k = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        tc.conv2d(x, k, None)
    big = Tensor(np.zeros((1, 2, 6, 6)))
    with pytest.raises(ShapeError):
        tc.conv2d(x, big, None)
    k2 = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ContractError, match="stride"):
        tc.conv2d(x, k2, None, stride=0)


# ---------------------------------------------------------------------------
# elementwise suite


def test_silu_at_zero():
    assert tc.silu(Tensor([0.0])).data[0] == 0.0


def test_softmax_symmetry():
    out = tc.softmax(Tensor([0.0, 0.0]), axis=-1)
    assert np.array_equal(out.data, [0.5, 0.5])


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one(seed, nrows, ncols):
    x = rng(seed).standard_normal((nrows, ncols)) * 5
    out = tc.softmax(Tensor(x, dtype="float64"), axis=-1).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-6)
    assert oracles.max_rel_err(out, oracles.softmax_rows(x)) <= 1e-9


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
@settings(max_examples=20, deadline=None)
def test_group_norm_statistics_vs_two_pass(seed, groups):
    r = rng(seed)
    x = r.standard_normal((2, 4, 3, 5)) * 3 + 1
    w, b = tc.ones((4,), dtype="float64"), tc.zeros((4,), dtype="float64")
    out = tc.group_norm(Tensor(x, dtype="float64"), w, b, groups=groups, eps=1e-5).data
    mu, var = oracles.group_stats_2pass(out, groups)
    assert np.all(np.abs(mu) <= 1e-10)
    assert np.all(np.abs(var - 1.0) <= 1e-4)
    # and it is the two-pass normalization of the input
    imu, ivar = oracles.group_stats_2pass(x, groups)
    cg = 4 // groups
    ref = (x - np.repeat(imu, cg, 1)[..., None, None]) \
        / np.sqrt(np.repeat(ivar, cg, 1)[..., None, None] + 1e-5)
    assert oracles.max_rel_err(out, ref) <= 1e-9


def test_group_norm_groups_must_divide():
    x = tc.zeros((1, 6, 2, 2))
    with pytest.raises(ContractError, match="divide"):
        tc.group_norm(x, tc.ones((6,)), tc.zeros((6,)), groups=4)


def test_mse_hand_value():
    out = tc.mse(Tensor([1.0, 2.0]), Tensor([0.0, 4.0]))
    assert out.shape == ()
    assert out.item() == pytest.approx((1 + 4) / 2)


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_dtype_mismatch_rejected():
    with pytest.raises(ContractError, match="float32.*float64"):
        tc.add(Tensor([1.0], dtype="float32"), Tensor([1.0], dtype="float64"))


# ---------------------------------------------------------------------------
# backward / finite differences


def test_backward_of_sum_is_ones():
    x = Tensor(rng(1).standard_normal((3, 4)), trainable=True, name="x")
    with GradTape() as tape:
        loss = tc.sum_all(x)
    grads = tc.backward(loss, tape)
    assert np.array_equal(grads["x"].data, np.ones((3, 4), dtype=np.float32))


def test_backward_of_half_square_is_x():
    x = Tensor(rng(2).standard_normal((5,)), dtype="float64", trainable=True, name="x")
    with GradTape() as tape:
        loss = tc.mul_scalar(tc.sum_all(tc.mul(x, x)), 0.5)
    grads = tc.backward(loss, tape)
    assert oracles.max_rel_err(grads["x"].data, x.data) <= 1e-12


def test_backward_requires_scalar_loss():
    x = Tensor(np.zeros((2, 2)), trainable=True, name="x")
    with GradTape() as tape:
        y = tc.add(x, x)
    with pytest.raises(ContractError, match="scalar"):
        tc.backward(y, tape)


def test_frozen_leaves_get_no_gradient_but_pass_it_through():
    r = rng(3)
    x = named(r, (4, 3), "x")
    w_frozen = Tensor(r.standard_normal((3, 3)), dtype="float64", name="w_frozen")
    w_train = named(r, (2, 3), "w_train")
    with GradTape() as tape:
        h = tc.matmul(x, w_frozen)          # gradient must flow through this
        loss = tc.sum_all(tc.linear(h, w_train, None))
    grads = tc.backward(loss, tape)
    assert "w_frozen" not in grads
    assert set(grads) == {"x", "w_train"}
    fd = tc.finite_diff_grad(
        lambda _x: _replay_two_layer(x, w_frozen, w_train), x, eps=1e-5)
    assert oracles.max_rel_err(grads["x"].data, fd.data) <= 1e-3


def _replay_two_layer(x, w_frozen, w_train):
    return tc.sum_all(tc.linear(tc.matmul(x, w_frozen), w_train, None))


def test_two_layer_net_every_parameter_vs_finite_diff():
    r = rng(4)
    x = Tensor(r.standard_normal((3, 4)), dtype="float64")
    w1, b1 = named(r, (5, 4), "w1"), named(r, (5,), "b1")
    w2, b2 = named(r, (2, 5), "w2"), named(r, (2,), "b2")
    tgt = Tensor(r.standard_normal((3, 2)), dtype="float64")

    def make_loss():
        h = tc.silu(tc.linear(x, w1, b1))
        return tc.mse(tc.linear(h, w2, b2), tgt)

    fd_check(make_loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})


def test_finite_diff_constant_slope():
    x = Tensor([3.0], dtype="float64", trainable=True)
    fd = tc.finite_diff_grad(lambda t: tc.sum_all(tc.mul(t, t)), x, eps=1e-4)
    assert abs(fd.data[0] - 6.0) <= 1e-6
    fd1 = tc.finite_diff_grad(lambda t: tc.sum_all(t), x, eps=1e-4)
    assert fd1.data[0] == pytest.approx(1.0)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ContractError):
        tc.finite_diff_grad(lambda t: tc.sum_all(t), Tensor([1.0]), eps=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_op_suite_gradients_vs_finite_diff(seed):
    """Every differentiable op, analytic vs central FD in float64."""
    r = rng(1000 + seed)
    a = named(r, (2, 3, 4, 4), "a")
    b = named(r, (2, 3, 4, 4), "b")
    w = named(r, (3,), "w")
    bias = named(r, (3,), "bias")
    k = named(r, (2, 3, 3, 3), "k")
    kb = named(r, (2,), "kb")
    lin_w = named(r, (5, 8), "lin_w")
    lin_b = named(r, (5,), "lin_b")
    table = named(r, (4, 3), "table")
    ids = np.array([0, 2, 2])

    cases = {
        "add": (lambda: tc.sum_all(tc.mul(tc.add(a, b), b)), [a, b]),
        "sub": (lambda: tc.sum_all(tc.mul(tc.sub(a, b), a)), [a, b]),
        "mul_scalar": (lambda: tc.sum_all(tc.mul(tc.mul_scalar(a, -1.7), a)), [a]),
        "silu": (lambda: tc.mse(tc.silu(a), b), [a]),
        "softmax": (lambda: tc.mse(tc.softmax(tc.reshape(a, (6, 16)), axis=-1),
                                   tc.reshape(b, (6, 16))), [a]),
        "group_norm": (lambda: tc.mse(tc.group_norm(a, w, bias, groups=3), b),
                       [a, w, bias]),
        "conv2d": (lambda: tc.mse(tc.conv2d(a, k, kb, stride=1, padding=1),
                                  tc.mul_scalar(tc.conv2d(b, k, kb, 1, 1), 0.0)),
                   [a, k, kb]),
        "linear": (lambda: tc.sum_all(tc.silu(tc.linear(
            tc.reshape(a, (12, 8)), lin_w, lin_b))), [a, lin_w, lin_b]),
        "matmul": (lambda: tc.sum_all(tc.matmul(tc.reshape(a, (2, 24, 2)),
                                                tc.reshape(b, (2, 2, 24)))), [a, b]),
        "transpose": (lambda: tc.mse(tc.transpose(a, (0, 2, 3, 1)),
                                     tc.transpose(b, (0, 2, 3, 1))), [a]),
        "concat": (lambda: tc.mse(tc.concat([a, b], 1),
                                  tc.concat([b, a], 1)), [a, b]),
        "upsample": (lambda: tc.sum_all(tc.mul(tc.upsample_nearest2x(a),
                                               tc.upsample_nearest2x(b))), [a]),
        "index_rows": (lambda: tc.sum_all(tc.mul(tc.index_rows(table, ids),
                                                 tc.index_rows(table, ids))), [table]),
        "mse": (lambda: tc.mse(a, b), [a, b]),
    }
    for op, (make_loss, tensors) in cases.items():
        fd_check(make_loss, {t.name: t for t in tensors})


# ---------------------------------------------------------------------------
# tape structure and determinism


def test_tape_is_topologically_ordered():
    x = Tensor(rng(5).standard_normal((3, 3)), trainable=True, name="x")
    with GradTape() as tape:
        y = tc.silu(tc.add(x, x))
        tc.sum_all(tc.mul(y, y))
    for nid, node in enumerate(tape.nodes):
        assert all(p < nid for p in node.parents)


def test_gradients_map_populated_after_backward():
    x = Tensor(rng(6).standard_normal((2, 2)), trainable=True, name="x")
    with GradTape() as tape:
        y = tc.mul(x, x)
        loss = tc.sum_all(y)
    tc.backward(loss, tape)
    gy = tape.grad_of(y)
    assert gy is not None and gy.shape == y.shape
    assert tape.grad_of(x).shape == x.shape


def test_forward_is_bit_deterministic():
    r = rng(7)
    x = r.standard_normal((2, 3, 8, 8))
    k = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    f = lambda: tc.silu(tc.conv2d(Tensor(x), Tensor(k), Tensor(b), 2, 1)).data
    assert f().tobytes() == f().tobytes()
