import numpy as np
import pytest

from slatlab.autodiff import (LabelOutOfRange, NonScalarLoss, ShapeMismatch,
                              Tape, UnknownSite, UnsupportedOps, backward,
                              grad_check, inject, pass_counts, per_example_xent,
                              replayed_node, reset_pass_counts)


def test_dense_identity():
    t = Tape()
    out = t.record("dense", [np.array([1.0, 2.0]), np.eye(2), np.zeros(2)])
    assert np.array_equal(out.value, [1.0, 2.0])


def test_relu_definition():
    t = Tape()
    out = t.record("relu", [np.array([-1.0, 3.0])])
    assert np.array_equal(out.value, [0.0, 3.0])


def test_conv2d_center_of_ones():
    # 3x3 all-ones kernel over 3x3 all-ones input, zero padding: center sums 9
    t = Tape()
    out = t.record("conv2d", [np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)),
                              np.zeros(1)])
    assert out.value[0, 0, 1, 1] == pytest.approx(9.0)
    assert out.value[0, 0, 0, 0] == pytest.approx(4.0)  # corner sees 2x2 patch


def test_xent_examples():
    t = Tape()
    l0 = t.record("loss_softmax_xent", [np.array([0.0, 0.0])], labels=0)
    assert float(l0.value) == pytest.approx(np.log(2.0), rel=1e-12)
    l1 = t.record("loss_softmax_xent", [np.array([10.0, 0.0])], labels=0)
    assert float(l1.value) == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-9)
    l2 = t.record("loss_softmax_xent", [np.array([0.0, 10.0])], labels=0)
    assert float(l2.value) == pytest.approx(10.0 + np.log1p(np.exp(-10.0)), rel=1e-9)


def test_xent_label_out_of_range():
    t = Tape()
    with pytest.raises(LabelOutOfRange):
        t.record("loss_softmax_xent", [np.zeros(3)], labels=3)
    with pytest.raises(LabelOutOfRange):
        t.record("loss_softmax_xent", [np.zeros((2, 3))],
                 labels=np.array([0, -1]), reduction="sum")


def test_backward_sum_gives_ones():
    t = Tape()
    x = t.leaf(np.array([1.0, -2.0, 3.0]))
    backward(t, t.record("sum_all", [x]))
    assert np.array_equal(t.grads[x.idx], np.ones(3))


def test_backward_linear_gradient():
    t = Tape()
    x = t.leaf(np.array([5.0, 5.0]))
    out = t.record("dense", [x, np.array([[2.0], [-1.0]]), np.zeros(1)])
    backward(t, t.record("sum_all", [out]))
    assert np.array_equal(t.grads[x.idx], [2.0, -1.0])


def test_nonscalar_loss_rejected():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(NonScalarLoss):
        backward(t, x)


def test_shape_mismatch_reports_op():
    t = Tape()
    with pytest.raises(ShapeMismatch) as err:
        t.record("dense", [np.ones(3), np.eye(2), np.zeros(2)])
    assert err.value.op == "dense"
    with pytest.raises(ShapeMismatch):
        t.record("add", [np.ones(3), np.ones(4)])


SMOOTH_POINTS = 10  # per-op sample for the unit suite; the acceptance gate runs 100


def _relu_safe(rng, shape):
    x = rng.normal(size=shape)
    x[np.abs(x) < 1e-3] += 0.1
    return x


def op_graph_builders():
    """(name, builder, point factory) covering every public op kind."""
    rng = np.random.default_rng(42)
    w1 = rng.normal(size=(4, 3)) * 0.7
    kw = rng.normal(size=(2, 1, 3, 3)) * 0.7
    dw = rng.normal(size=(8, 3)) * 0.7

    def scalarize(t, node):
        return t.record("sum_all", [t.record("mul", [node, t.leaf(
            np.arange(1.0, 1.0 + node.value.size).reshape(node.value.shape))])])

    cases = []
    cases.append(("dense", lambda t, x: scalarize(t, t.record(
        "dense", [x, w1, np.arange(3.0)])), lambda r: r.normal(size=(2, 4))))
    cases.append(("conv2d", lambda t, x: scalarize(t, t.record(
        "conv2d", [x, kw, np.array([0.1, -0.2])])),
        lambda r: r.normal(size=(2, 1, 4, 4))))
    cases.append(("relu", lambda t, x: scalarize(t, t.record("relu", [x])),
                  lambda r: _relu_safe(r, (3, 5))))
    cases.append(("softplus", lambda t, x: scalarize(t, t.record("softplus", [x])),
                  lambda r: r.normal(size=(3, 5))))

    def pool_point(r):
        # distinct entries keep the argmax away from ties
        x = r.permutation(32).astype(float).reshape(1, 2, 4, 4)
        return x + r.uniform(0.1, 0.4, size=x.shape)
    cases.append(("maxpool2x2", lambda t, x: scalarize(
        t, t.record("maxpool2x2", [x])), pool_point))
    cases.append(("flatten", lambda t, x: scalarize(t, t.record(
        "dense", [t.record("flatten", [x]), dw, np.zeros(3)])),
        lambda r: r.normal(size=(2, 2, 2, 2))))
    cases.append(("add", lambda t, x: scalarize(t, t.record(
        "add", [x, t.leaf(np.full((3, 2), 0.5))])), lambda r: r.normal(size=(3, 2))))
    cases.append(("scale", lambda t, x: scalarize(t, t.record(
        "scale", [x], c=-1.7)), lambda r: r.normal(size=(3, 2))))
    cases.append(("loss_softmax_xent", lambda t, x: t.record(
        "loss_softmax_xent", [x], labels=np.array([0, 2, 1]), reduction="mean"),
        lambda r: r.normal(size=(3, 3))))
    return cases


@pytest.mark.parametrize("name,builder,point", op_graph_builders(),
                         ids=[c[0] for c in op_graph_builders()])
def test_every_op_matches_finite_differences(name, builder, point):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(SMOOTH_POINTS):
        assert grad_check(builder, point(rng)) <= 1e-6


def test_free_latent_gradients_match_truncated():
    from slatlab.models import build_toy_mlp, forward_with_latents, truncated_forward
    rng = np.random.default_rng(7)
    model = build_toy_mlp(8, "softplus", seed=3)
    x = rng.normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    logits, latents, tape = forward_with_latents(model, x)
    loss = tape.record("loss_softmax_xent", [logits], labels=y, reduction="mean")
    backward(tape, loss)
    for k in model.K:
        leaf_logits, ttape = truncated_forward(model, k, latents[k])
        tloss = ttape.record("loss_softmax_xent", [leaf_logits], labels=y,
                             reduction="mean")
        backward(ttape, tloss)
        full = tape.grads[tape.sites[k]]
        trunc = ttape.grads[ttape.input.idx]
        assert np.abs(full - trunc).max() <= 1e-12 * max(1, np.abs(trunc).max())


def test_inject_zero_deltas_identity():
    rng = np.random.default_rng(0)
    t = Tape()
    x = t.leaf(rng.normal(size=(3, 2)))
    t.register_site(0, x)
    h = t.record("softplus", [t.record("dense", [x, rng.normal(size=(2, 4)),
                                                 np.zeros(4)])])
    t.register_site(1, h)
    z = t.record("dense", [h, rng.normal(size=(4, 2)), np.zeros(2)])
    t2 = inject(t, {0: np.zeros((3, 2)), 1: np.zeros((3, 4))})
    assert np.array_equal(replayed_node(t2, z).value, z.value)


def test_inject_linear_shift():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(2, 3))
    t = Tape()
    x = t.leaf(rng.normal(size=(4, 2)))
    t.register_site(0, x)
    z = t.record("dense", [x, w, np.zeros(3)])
    v = rng.normal(size=(4, 2))
    t2 = inject(t, {0: v})
    np.testing.assert_allclose(replayed_node(t2, z).value, z.value + v @ w,
                               rtol=0, atol=1e-12)


def test_inject_unknown_site_and_shape():
    t = Tape()
    x = t.leaf(np.ones((2, 2)))
    t.register_site(0, x)
    with pytest.raises(UnknownSite):
        inject(t, {5: np.zeros((2, 2))})
    with pytest.raises(ShapeMismatch):
        inject(t, {0: np.zeros((3, 2))})


def test_reverse_sweep_deterministic():
    rng = np.random.default_rng(5)
    t = Tape()
    x = t.leaf(rng.normal(size=(4, 3)))
    h = t.record("softplus", [t.record("dense", [x, rng.normal(size=(3, 6)),
                                                 rng.normal(size=6)])])
    z = t.record("dense", [h, rng.normal(size=(6, 2)), np.zeros(2)])
    loss = t.record("loss_softmax_xent", [z], labels=np.array([0, 1, 1, 0]))
    backward(t, loss)
    first = {i: g.copy() for i, g in t.grads.items()}
    backward(t, loss)
    for i, g in t.grads.items():
        assert np.array_equal(first[i], g)


def test_grad_check_linear_is_tight():
    w = np.array([[1.5], [-2.0]])

    def builder(t, x):
        return t.record("sum_all", [t.record("dense", [x, w, np.zeros(1)])])

    assert grad_check(builder, np.array([0.3, -0.7])) <= 1e-10


def test_pass_counters():
    from slatlab.models import build_linear, forward_with_latents
    reset_pass_counts()
    model = build_linear(3, 2, seed=0)
    x = np.zeros((2, 3))
    logits, _, tape = forward_with_latents(model, x)
    loss = tape.record("loss_softmax_xent", [logits], labels=np.array([0, 1]))
    backward(tape, loss)
    assert pass_counts() == {"forward": 1, "backward": 1}


def test_graph_backward_rejects_relu():
    t = Tape()
    x = t.leaf(_relu_safe(np.random.default_rng(0), (2, 2)))
    loss = t.record("sum_all", [t.record("relu", [x])])
    with pytest.raises(UnsupportedOps):
        backward(t, loss, as_graph=True)


def test_per_example_xent_matches_op():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(6, 4)) * 3
    y = rng.integers(0, 4, size=6)
    t = Tape()
    loss = t.record("loss_softmax_xent", [z], labels=y, reduction="sum")
    assert float(loss.value) == pytest.approx(per_example_xent(z, y).sum(), rel=1e-12)
