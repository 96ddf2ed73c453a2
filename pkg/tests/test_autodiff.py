import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siamlob import autodiff as ad
from siamlob.gradcheck import PRIMITIVE_TOL, GradCheckSettings, check_primitives


def P(x, name="p"):
    return ad.Parameter(np.asarray(x, dtype=float), name)


def test_forward_examples(rng):
    X = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), X).data, X)
    assert ad.sigmoid(0.0).item() == 0.5 and ad.tanh(0.0).item() == 0.0
    np.testing.assert_allclose(ad.softmax(np.full(3, 2.5)).data, np.full(3, 1 / 3), atol=1e-15)


def test_backprop_examples():
    w = P(5.0, "w")
    assert ad.backprop(w * 2.0, [w])["w"] == 2.0
    z = P(0.0, "z")
    assert ad.backprop(ad.sigmoid(z), [z])["z"] == pytest.approx(0.25, abs=1e-15)
    p = P([3.0, 4.0, 5.0, 6.0], "p")
    g = ad.backprop(ad.mean(ad.abs_(p - np.zeros(4))), [p])["p"]
    np.testing.assert_allclose(g, np.full(4, 0.25))


def test_abs_subgradient_at_zero():
    p = P([0.0, -2.0], "p")
    np.testing.assert_array_equal(ad.backprop(ad.sum_(ad.abs_(p)), [p])["p"], [0.0, -1.0])


def test_accumulation_and_reset():
    w = P(1.0, "w")
    ad.backprop(w * 3.0, [w])
    g = ad.backprop(w * 3.0, [w])
    assert g["w"] == 6.0
    ad.zero_grad([w])
    assert ad.backprop(w * 3.0, [w])["w"] == 3.0


def test_unused_parameter_gets_zero():
    a, b = P([1.0, 2.0], "a"), P([[1.0]], "b")
    g = ad.backprop(ad.sum_(a), [a, b])
    np.testing.assert_array_equal(g["b"], [[0.0]])


def test_shared_subexpression_and_slices():
    x = P([1.0, 2.0, 3.0], "x")
    y = x * x
    loss = ad.sum_(y[0:2]) + ad.sum_(y[1:3]) + ad.sum_(y)
    g = ad.backprop(loss, [x])["x"]
    np.testing.assert_allclose(g, 2 * np.array([1.0, 2.0, 3.0]) * np.array([2, 3, 2]))


def test_errors():
    with pytest.raises(ad.DimensionError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.DimensionError):
        ad.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)
    with pytest.raises(ad.DimensionError):
        ad.conv1d_same(np.ones((1, 5, 2)), np.ones((3, 2, 2)))
    with pytest.raises(ValueError):
        ad.backprop(P([1.0, 2.0]), [])
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.mul(P([1e300]), 1e300)


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("softmax", [np.array([[0.0, 0.0]])], axis=-1)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])
    with pytest.raises(ValueError, match="nope"):
        ad.apply_primitive("nope", [])


def test_conv_matches_direct_loop(rng):
    B, T, cin, cout = 2, 6, 3, 4
    x = rng.normal(size=(B, T, cin))
    for k in (1, 3, 5, 7):
        w, b = rng.normal(size=(cout, cin, k)), rng.normal(size=cout)
        out = ad.conv1d_same(x, w, b).data
        assert out.shape == (B, T, cout)
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        ref = np.zeros((B, T, cout))
        for bi in range(B):
            for t in range(T):
                for o in range(cout):
                    ref[bi, t, o] = b[o] + sum(w[o, c, j] * xp[bi, t + j, c] for c in range(cin) for j in range(k))
        np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_distribution(xs):
    s = ad.softmax(np.array(xs)).data
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) < 1e-12


def test_grad_check_examples():
    w = P(3.0, "w")
    assert ad.grad_check(lambda: w * w, [w], eps=1e-5) < 1e-8
    a = P([1.5, -2.0], "a")
    assert ad.grad_check(lambda: ad.sum_(a * np.array([3.0, 7.0])) + 1.0, [a]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    w = P([0.7], "w")

    def bad():
        # forward w^2 but the node's backward claims 3w
        return ad.sum_(ad._node("bad", w.data ** 2, [w], lambda g: (g * 3 * w.data,)))

    assert ad.grad_check(bad, [w]) > 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitives_pass_finite_differences(seed):
    errs = check_primitives(GradCheckSettings(seed=seed))
    assert max(errs.values()) < PRIMITIVE_TOL, errs


def test_no_grad_is_thread_local():
    w = P(1.0, "w")
    seen = {}

    def other():
        seen["other"] = (w * 2.0).requires_grad

    with ad.no_grad():
        assert not (w * 2.0).requires_grad
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert seen["other"] is True


# -- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient_no_decay_is_fixed_point():
    p = P([1.0, -2.0], "p")
    ad.adam_step({"p": p}, {"p": np.zeros(2)}, ad.AdamState(), ad.AdamConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = P([1.0], "p")
    ad.adam_step({"p": p}, {"p": np.ones(1)}, ad.AdamState(), ad.AdamConfig())
    # first bias-corrected step moves by lr * g'/(|g'| + eps)
    g = 1.001
    assert p.data[0] == pytest.approx(1.0 - 1e-4 * g / (g + 1e-8), abs=1e-15)
    q = P([1.0], "q")
    ad.adam_step({"q": q}, {"q": np.zeros(1)}, ad.AdamState(), ad.AdamConfig())
    assert q.data[0] - 1.0 == pytest.approx(-1e-4, rel=1e-4)


def test_adam_matches_scalar_reference(rng):
    cfg = ad.AdamConfig(lr=1e-2, weight_decay=1e-2)
    p = P(rng.normal(size=5), "p")
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = ad.AdamState()
    for t in range(1, 21):
        g = rng.normal(size=5)
        ad.adam_step({"p": p}, {"p": g}, state, cfg)
        for i in range(5):
            gi = g[i] + cfg.weight_decay * ref[i]
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi
            mh = m[i] / (1 - cfg.beta1 ** t)
            vh = v[i] / (1 - cfg.beta2 ** t)
            ref[i] -= cfg.lr * mh / (vh ** 0.5 + cfg.eps)
    assert state.t == 20
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-14)


def test_adam_matches_torch(rng):
    torch = pytest.importorskip("torch")
    cfg = ad.AdamConfig(lr=3e-3, weight_decay=1e-3)
    init = rng.normal(size=(3, 4))
    p = P(init, "p")
    tp = torch.tensor(init, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([tp], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    state = ad.AdamState()
    for _ in range(10):
        g = rng.normal(size=(3, 4))
        ad.adam_step({"p": p}, {"p": g}, state, cfg)
        tp.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
    np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=0, atol=1e-12)


def test_adam_missing_gradient():
    with pytest.raises(KeyError, match="b"):
        ad.adam_step({"a": P(1.0, "a"), "b": P(1.0, "b")}, {"a": np.zeros(())}, ad.AdamState(), ad.AdamConfig())


def test_adam_deterministic(rng):
    init, grads = rng.normal(size=4), [rng.normal(size=4) for _ in range(5)]
    outs = []
    for _ in range(2):
        p, st_ = P(init, "p"), ad.AdamState()
        for g in grads:
            ad.adam_step({"p": p}, {"p": g}, st_, ad.AdamConfig())
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"b.x": rng.normal(size=(2, 3)), "a": np.array(1.5), "c": np.zeros((0, 2))}
    ad.save_checkpoint(tmp_path / "c.bin", tensors)
    back = ad.load_checkpoint(tmp_path / "c.bin")
    assert sorted(back) == sorted(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    blob = ad.dumps_checkpoint(tensors)
    assert blob.startswith(b"SLOBCKPT") and ad.dumps_checkpoint(back) == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        ad.loads_checkpoint(b"not a checkpoint")
    blob = bytearray(ad.dumps_checkpoint({"a": np.ones(1)}))
    blob[8] = 9
    with pytest.raises(ValueError, match="version"):
        ad.loads_checkpoint(bytes(blob))
