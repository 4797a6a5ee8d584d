import zlib

import numpy as np
import pytest
import scipy.sparse as sp

from blanketmh import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grads(build, arrays: list[np.ndarray], tol: float = 1e-4) -> None:
    """Compare tape gradients of the scalar ``build(*tensors)`` with central differences."""
    tape = ad.Tape()
    leaves = [tape.param(a) for a in arrays]
    out = build(*leaves)
    grads = ad.backward(tape, out)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [ad.Tensor(x) for x in arrays]
            args[k] = ad.Tensor(v)
            return float(build(*args).data)

        num = numeric_grad(f, a.copy())
        got = grads[leaves[k]]
        mask = np.abs(num) > 1e-6
        rel = np.abs(got - num)[mask] / np.maximum(np.abs(num)[mask], 1e-8)
        assert rel.size == 0 or rel.max() < tol, (k, rel.max())
        assert np.allclose(got[~mask], num[~mask], atol=1e-6)


def rand(rng, *shape):
    return rng.normal(size=shape)


BLOCKS = {
    "add_broadcast": (lambda a, b: ad.sum(ad.square(ad.add(a, b))), lambda r: [rand(r, 3, 4), rand(r, 4)]),
    "sub_mul": (lambda a, b: ad.sum(ad.mul(ad.sub(a, b), a)), lambda r: [rand(r, 3, 2), rand(r, 3, 2)]),
    "affine_vector": (lambda W, x, b: ad.sum(ad.tanh(ad.affine(W, x, b))), lambda r: [rand(r, 4, 3), rand(r, 3), rand(r, 4)]),
    "affine_batch": (lambda W, x, b: ad.sum(ad.tanh(ad.affine(W, x, b))), lambda r: [rand(r, 4, 3), rand(r, 5, 3), rand(r, 4)]),
    "exp_log": (lambda a: ad.sum(ad.log(ad.add(ad.exp(a), 1.0))), lambda r: [rand(r, 6)]),
    "logsumexp": (lambda a: ad.sum(ad.logsumexp(a)), lambda r: [rand(r, 3, 5)]),
    "log_softmax_pick": (lambda a: ad.sum(ad.pick(ad.log_softmax(a), np.array([0, 2, 1]))), lambda r: [rand(r, 3, 4)]),
    "softmax": (lambda a: ad.sum(ad.square(ad.softmax_logits(a))), lambda r: [rand(r, 2, 5)]),
    "concat_columns": (
        lambda a, b: ad.sum(ad.square(ad.columns(ad.concat([a, b], axis=-1), 1, 5))),
        lambda r: [rand(r, 3, 3), rand(r, 3, 4)],
    ),
    "clamp_interior": (lambda a: ad.sum(ad.square(ad.clamp(a, -10.0, 10.0))), lambda r: [rand(r, 5)]),
    "scale_neg": (lambda a: ad.sum(ad.scale(ad.square(-a), -0.5)), lambda r: [rand(r, 4)]),
    "mix_sparse": (
        lambda h: ad.sum(ad.tanh(ad.mix(sp.csr_matrix(np.array([[0.5, 0.0, 0.2], [0.0, 1.0, 0.3]])), h))),
        lambda r: [rand(r, 3, 4)],
    ),
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(BLOCKS))
    def test_block_gradient_25_points(self, name):
        build, make = BLOCKS[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(25):
            check_grads(build, make(rng))

    def test_unreached_leaf_gets_zero(self):
        tape = ad.Tape()
        a, b = tape.param(np.ones(3)), tape.param(np.ones(2))
        g = ad.backward(tape, ad.sum(a))
        np.testing.assert_array_equal(g[b], np.zeros(2))

    def test_fan_out_accumulates(self):
        tape = ad.Tape()
        a = tape.param(np.array([2.0]))
        g = ad.backward(tape, ad.sum(ad.mul(a, a) + a))
        assert g[a][0] == pytest.approx(5.0)

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        a = tape.param(np.ones(3))
        with pytest.raises(ValueError):
            ad.backward(tape, ad.tanh(a))

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.affine(np.ones((2, 3)), np.ones(4))


class TestAdam:
    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-3])
        p, _ = ad.adam_step({"w": np.zeros(3)}, {"w": g}, ad.AdamState(), lr=0.01)
        np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        params, state = {"w": np.zeros(2)}, ad.AdamState()
        g = {"w": np.array([0.5, -3.0])}
        for _ in range(1000):
            prev = params["w"]
            params, state = ad.adam_step(params, g, state, lr=1e-3)
        step = np.abs(params["w"] - prev)
        assert np.all(np.abs(step - 1e-3) <= 1e-5)

    def test_minimizes_quadratic(self):
        params, state = {"w": np.array([3.0, -2.0])}, ad.AdamState()
        for _ in range(3000):
            params, state = ad.adam_step(params, {"w": 2 * params["w"]}, state, lr=0.01)
        assert np.abs(params["w"]).max() < 1e-2
