import zlib

import numpy as np
import pytest

from baltaml.tensor import (
    OP_KINDS,
    DomainError,
    GradError,
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    const,
    finite_diff_check,
    forward_op,
    grad,
    leaf,
    stack_rows,
)


def test_relu_example():
    assert leaf([-1.0, 0.0, 2.0]).relu().value.tolist() == [0.0, 0.0, 2.0]


def test_softmax_uniform():
    np.testing.assert_allclose(leaf(np.zeros(5)).softmax(axis=0).value, np.full(5, 0.2), rtol=0, atol=1e-15)


def test_population_variance():
    assert leaf([0.0, 2.0]).var().item() == 1.0
    assert leaf([3.7]).var().item() == 0.0


def test_square_grad():
    x = leaf(3.0)
    (g,) = grad(x * x, [x])
    assert g.item() == 6.0


def test_cube_second_derivative():
    x = leaf(2.0)
    (g,) = grad(x**3, [x], as_graph=True)
    (h,) = grad(g, [x])
    assert abs(h.item() - 12.0) < 1e-12


def test_sum_of_cubes_hessian_diagonal():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=7)
    x = leaf(xv)
    (g,) = grad((x**3).sum(), [x], as_graph=True)
    # d/dx_i of sum_j g_j = 6 x_i because the hessian is diagonal
    (h,) = grad(g.sum(), [x])
    np.testing.assert_allclose(h.value, 6 * xv, rtol=0, atol=1e-10)


def test_relu_subgradient_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    (g,) = grad(x.relu().sum(), [x])
    assert g.value.tolist() == [0.0, 1.0, 0.0]


def test_errors():
    with pytest.raises(ShapeError) as info:
        leaf(np.ones((2, 3))) @ leaf(np.ones((2, 3)))
    assert info.value.kind == "matmul" and (2, 3) in info.value.shapes
    with pytest.raises(ShapeError):
        leaf(np.ones(3)) + leaf(np.ones(4))
    with pytest.raises(DomainError):
        leaf([1.0, 0.0]).log()
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        leaf([1000.0]).exp()
    with pytest.raises(GradError):
        x = leaf([1.0, 2.0])
        grad(x * 2.0, [x])
    with pytest.raises(GradError):
        grad(leaf(1.0) * 2.0, [const(1.0)])


def test_grad_wrt_not_in_graph():
    x, y = leaf(1.0), leaf(2.0)
    with Graph() as g:
        out = x * 3.0
    with pytest.raises(GradError):
        grad(out, [y], graph=g)
    assert grad(out, [x], graph=g)[0].item() == 3.0


def test_unused_input_gets_zeros():
    x, y = leaf([1.0, 2.0]), leaf([[1.0]])
    gx, gy = grad((x * x).sum(), [x, y])
    assert gy.value.shape == (1, 1) and gy.value[0, 0] == 0.0


def test_graph_records_are_topological_and_replay_exactly():
    rng = np.random.default_rng(3)
    W, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
    x = const(rng.normal(size=(5, 4)))
    with Graph() as g:
        out = ((x @ W + b).relu().softmax(axis=1) * 2.0).mean()
        gs = grad(out, [W, b], as_graph=True)
        total = gs[0].sum() + gs[1].sum()
    seen = {W.node_id, b.node_id}
    for rec in g.records:
        for i in rec.input_ids:
            if i is not None:
                assert i < rec.output_id
        seen.add(rec.output_id)
    replayed = g.replay()
    for rec, v in zip(g.records, replayed):
        assert np.array_equal(rec.output.value, v)
    assert np.isfinite(total.item())


def test_finite_diff_check_contract():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    A = A @ A.T
    err = finite_diff_check(lambda p: ((p[0] @ const(A)) * p[0]).sum(), [rng.normal(size=(1, 4))], 1e-5)
    assert err < 1e-8
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: p[0].sum(), [np.ones(2)], 0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda p: const(np.inf) + p[0].sum(), [np.ones(2)])


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, size=6)
    params = [rng.normal(size=(3, 8)), rng.normal(size=8) * 0.1, rng.normal(size=(8, 4)), np.zeros(4)]

    def f(p):
        h = (const(x) @ p[0] + p[1]).relu()
        return (h @ p[2] + p[3]).cross_entropy(y).mean()

    assert finite_diff_check(f, params, 1e-5) < 1e-4


# one scalar-valued probe per op kind; inputs are shifted away from relu kinks
# and kept positive where the op needs it
def _away_from_zero(rng, shape):
    v = rng.uniform(0.1, 1.5, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _probe(kind, rng):
    if kind == "add":
        return lambda p: (p[0] + p[1]).sum(), [rng.normal(size=(3, 4)), rng.normal(size=4)]
    if kind == "subtract":
        return lambda p: ((p[0] - p[1]) ** 2).sum(), [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))]
    if kind == "multiply":
        return lambda p: (p[0] * p[1]).sum(), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]
    if kind == "divide":
        return lambda p: (p[0] / p[1]).sum(), [rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, size=3)]
    if kind == "scale":
        return lambda p: (p[0] * 2.5).sum() + (p[0] * p[0]).sum(), [rng.normal(size=4)]
    if kind == "power":
        return lambda p: (p[0] ** 2.5).sum(), [rng.uniform(0.5, 2.0, size=5)]
    if kind == "matmul":
        return lambda p: ((p[0] @ p[1]) ** 2).sum(), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    if kind == "transpose":
        w = rng.normal(size=(4, 3))
        return lambda p: (p[0].T * const(w)).sum(), [rng.normal(size=(3, 4))]
    if kind == "relu":
        w = rng.normal(size=6)
        return lambda p: (p[0].relu() * const(w)).sum(), [_away_from_zero(rng, 6)]
    if kind == "exp":
        return lambda p: p[0].exp().sum(), [rng.normal(size=5)]
    if kind == "log":
        return lambda p: p[0].log().sum(), [rng.uniform(0.2, 3.0, size=5)]
    if kind == "sigmoid":
        return lambda p: (p[0].sigmoid() ** 2).sum(), [rng.normal(size=5)]
    if kind == "softplus":
        return lambda p: (p[0].softplus() ** 2).sum(), [rng.normal(size=5) * 3]
    if kind == "softmax":
        w = rng.normal(size=(3, 4))
        return lambda p: (p[0].softmax(axis=1) * const(w)).sum(), [rng.normal(size=(3, 4))]
    if kind == "log_softmax":
        w = rng.normal(size=(3, 4))
        return lambda p: (p[0].log_softmax(axis=0) * const(w)).sum(), [rng.normal(size=(3, 4))]
    if kind == "cross_entropy":
        y = rng.integers(0, 4, size=5)
        return lambda p: p[0].cross_entropy(y).sum(), [rng.normal(size=(5, 4))]
    if kind == "reduce_sum":
        return lambda p: (p[0].sum(axis=0) ** 2).sum(), [rng.normal(size=(3, 4))]
    if kind == "reduce_mean":
        return lambda p: (p[0].mean(axis=1, keepdims=True) ** 2).sum(), [rng.normal(size=(3, 4))]
    if kind == "reduce_var":
        return lambda p: (p[0].var(axis=0) ** 2).sum(), [rng.normal(size=(5, 3))]
    if kind == "broadcast":
        w = rng.normal(size=(4, 3))
        return lambda p: (p[0].broadcast_to((4, 3)) * const(w)).sum(), [rng.normal(size=3)]
    if kind == "sum_to":
        return lambda p: (forward_op("sum_to", [p[0]], shape=(1, 3)) ** 2).sum(), [rng.normal(size=(4, 3))]
    if kind == "reshape":
        w = rng.normal(size=(2, 6))
        return lambda p: (p[0].reshape(2, 6) * const(w)).sum(), [rng.normal(size=(3, 4))]
    if kind == "gather_rows":
        idx = rng.integers(0, 4, size=7)
        return lambda p: (p[0].gather_rows(idx) ** 2).sum(), [rng.normal(size=(4, 2))]
    if kind == "scatter_rows":
        idx = rng.integers(0, 5, size=6)
        w = rng.normal(size=(5, 2))
        return (lambda p: (forward_op("scatter_rows", [p[0]], index=idx, n_rows=5) * const(w)).sum(),
                [rng.normal(size=(6, 2))])
    if kind == "getitem":
        return lambda p: (p[0][1:3] ** 2).sum(), [rng.normal(size=(4, 3))]
    if kind == "index_put":
        w = rng.normal(size=(4, 3))
        return (lambda p: (forward_op("index_put", [p[0]], key=slice(1, 3), shape=(4, 3)) * const(w)).sum(),
                [rng.normal(size=(2, 3))])
    if kind == "concatenate":
        w = rng.normal(size=(2, 5))
        return lambda p: (concat([p[0], p[1]], axis=1) * const(w)).sum(), [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]
    raise AssertionError(f"no probe for op kind {kind}")


@pytest.mark.parametrize("kind", OP_KINDS)
def test_every_op_matches_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    worst = 0.0
    for _ in range(50):
        fn, params = _probe(kind, rng)
        worst = max(worst, finite_diff_check(fn, params, 1e-5))
    assert worst < 1e-4


@pytest.mark.parametrize("kind", ["exp", "log", "sigmoid", "softplus", "softmax", "matmul", "reduce_var"])
def test_second_order_matches_finite_differences(kind):
    # gradient of <grad f, v> must agree with differences of the first gradient
    rng = np.random.default_rng(11)
    for _ in range(5):
        fn, params = _probe(kind, rng)
        vs = [rng.normal(size=np.shape(p)) for p in params]

        def hvp(p):
            gs = grad(fn(p), p, as_graph=True)
            return sum(((g * const(v)).sum() for g, v in zip(gs, vs)), const(0.0))

        base = [np.array(p, dtype=float) for p in params]
        leaves = [leaf(b) for b in base]
        analytic = [g.value for g in grad(hvp(leaves), leaves)]
        step = 1e-5
        for i, b in enumerate(base):
            for j in np.ndindex(b.shape):
                plus = [x.copy() for x in base]
                minus = [x.copy() for x in base]
                plus[i][j] += step
                minus[i][j] -= step
                num = (hvp([leaf(x) for x in plus]).item() - hvp([leaf(x) for x in minus]).item()) / (2 * step)
                assert abs(num - analytic[i][j]) / max(1.0, abs(analytic[i][j])) < 1e-4


def test_stack_rows_and_concat():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    m = stack_rows([a, b])
    assert m.value.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    ga, gb = grad((m * const([[1.0, 2.0], [3.0, 4.0]])).sum(), [a, b])
    assert ga.value.tolist() == [1.0, 2.0] and gb.value.tolist() == [3.0, 4.0]


def test_constants_do_not_join_graph():
    c = const([1.0]) * 3.0
    assert c.node_id is None and not c.requires_grad
    assert isinstance(c, Tensor)
