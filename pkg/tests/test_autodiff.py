import numpy as np
import pytest

from mralign import autodiff as ad
from mralign.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)


class TestPrimitives:
    def test_matmul_hand_example(self):
        out = ad.apply_primitive("matmul", Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_exp_log_inverse(self):
        x = np.random.default_rng(0).uniform(0.1, 5, size=10)
        np.testing.assert_allclose(ad.exp(ad.log(Tensor(x))).data, x, rtol=1e-6)

    def test_sum_of_ones(self):
        assert ad.apply_primitive("sum", Tensor(np.ones((3, 3)))).item() == 9

    def test_float32_default_and_precision_switch(self):
        assert Tensor([1.0]).data.dtype == np.float32
        with ad.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ad.ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_scalar_broadcast(self):
        out = ad.mul(Tensor(np.ones((2, 2))), Tensor(3.0))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_domain_errors(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([1.0, 0.0]))
        with pytest.raises(ad.DomainError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError):
            ad.apply_primitive("conv", Tensor(1.0))

    def test_node_recorded_only_with_grad(self):
        a, b = Tensor([1.0]), leaf([2.0])
        assert ad.add(a, a).node is None
        assert ad.add(a, b).node[0] == "add"


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(size=(5, 7)) * 30
        s = ad.softmax(Tensor(x), axis=1, temperature=0.3).data
        np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-6)
        assert (s >= 0).all() and (s <= 1).all()

    def test_argmax_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.normal(size=6)
            tau = rng.uniform(0.01, 10)
            assert np.argmax(ad.softmax(Tensor(x), temperature=tau).data) == np.argmax(x)

    def test_closed_form_low_temperature(self):
        x = np.array([1.0, 2.0])
        e = np.exp((x - x.max()) / 0.07)
        np.testing.assert_allclose(ad.softmax(Tensor(x), temperature=0.07).data, e / e.sum(), rtol=1e-6)

    def test_bad_temperature(self):
        for t in (0.0, -1.0):
            with pytest.raises(ad.DomainError):
                ad.softmax(Tensor([1.0, 2.0]), temperature=t)


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-6)

    def test_zero_vector(self):
        np.testing.assert_array_equal(ad.l2_normalize(Tensor([0.0, 0.0])).data, [0.0, 0.0])

    def test_idempotent(self):
        v = Tensor(np.random.default_rng(3).normal(size=(4, 9)))
        once = ad.l2_normalize(v)
        np.testing.assert_allclose(ad.l2_normalize(once).data, once.data, rtol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(once.data, axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize(
        "a,b,expected",
        [([1.0, 2.0], [1.0, 2.0], 1.0), ([1.0, 0.0], [0.0, 1.0], 0.0), ([1.0, 0.0], [-1.0, 0.0], -1.0), ([0.0, 0.0], [1.0, 1.0], 0.0)],
    )
    def test_cosine(self, a, b, expected):
        assert ad.cosine_similarity(Tensor(a), Tensor(b)).item() == pytest.approx(expected, abs=1e-6)

    def test_cosine_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.cosine_similarity(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestStopGradient:
    def test_values_and_detachment(self):
        x = leaf([1.0, -2.0, 3.0])
        s = ad.stop_gradient(x)
        np.testing.assert_array_equal(s.data, x.data)
        assert s.requires_grad is False and s.node is None

    def test_gradients(self):
        x, y = leaf([1.0, -2.0, 3.0]), leaf([0.5, 4.0, -1.0])
        gx, gy = ad.grad(ad.tsum(ad.stop_gradient(x) * y), [x, y])
        assert np.all(gx == 0.0)
        np.testing.assert_array_equal(gy, x.data)

    def test_grad_y_matches_finite_differences(self):
        x = np.array([1.0, -2.0, 3.0], np.float32)
        res = ad.gradcheck(lambda p: ad.tsum(ad.stop_gradient(Tensor(x)) * p["y"]), {"y": np.array([0.5, 4.0, -1.0])})
        assert res.ok(1e-3)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        (g,) = ad.grad(x * x, [x])
        assert float(g) == pytest.approx(6.0)

    def test_sum_of_softmax_constant(self):
        x = leaf([0.3, -1.0, 2.0])
        (g,) = ad.grad(ad.tsum(ad.softmax(x)), [x])
        np.testing.assert_allclose(g, 0.0, atol=1e-6)

    def test_non_scalar_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.backward(leaf([1.0, 2.0]) * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = x * x
        (g,) = ad.grad(y * y + y, [x])  # x^4 + x^2
        assert float(g) == pytest.approx(4 * 8 + 4)

    def test_unreachable_gets_zero(self):
        x, z = leaf([1.0]), leaf([5.0])
        gx, gz = ad.grad(ad.tsum(x * 2.0), [x, z])
        np.testing.assert_array_equal(gz, [0.0])

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(4)
        A, B = rng.normal(size=(6, 5)), rng.normal(size=(5, 3))

        def run():
            a, b = leaf(A), leaf(B)
            loss = ad.tsum(ad.tanh(a @ b) * ad.log_softmax(a @ b, axis=1))
            return [loss.data.copy(), *ad.grad(loss, [a, b])]

        for u, v in zip(run(), run()):
            assert u.tobytes() == v.tobytes()


OPS = {
    "matmul": (lambda p: ad.tsum(ad.tanh(p["a"] @ p["b"])), {"a": (4, 3), "b": (3, 5)}),
    "batched_matmul": (lambda p: ad.tsum(ad.tanh(p["a"] @ p["b"])), {"a": (2, 4, 3), "b": (3, 2)}),
    "div": (lambda p: ad.tsum(p["a"] / (p["b"] * p["b"] + 1.0)), {"a": (3, 4), "b": (3, 4)}),
    "exp_log": (lambda p: ad.tsum(ad.log(ad.exp(p["a"]) + 1.0)), {"a": (5,)}),
    "sqrt": (lambda p: ad.tsum(ad.sqrt(p["a"] * p["a"] + 1.0)), {"a": (5,)}),
    "mean_max": (lambda p: ad.tmean(ad.tmax(p["a"], axis=1)) + ad.tmean(p["a"]), {"a": (4, 6)}),
    "concat_take": (lambda p: ad.tsum(ad.concat([p["a"], p["b"]], 0)[[0, 2, 2, 4]] * 3.0), {"a": (2, 3), "b": (3, 3)}),
    "transpose_reshape": (lambda p: ad.tsum(ad.reshape(ad.transpose(p["a"]), (6,)) * Tensor(np.arange(6.0))), {"a": (2, 3)}),
    "softmax_temperature": (lambda p: ad.tsum(ad.softmax(p["a"], 1, 0.5) * Tensor(np.arange(12.0).reshape(3, 4))), {"a": (3, 4)}),
    "log_softmax": (lambda p: ad.tsum(ad.log_softmax(p["a"], 1)[:, 1]), {"a": (3, 4)}),
    "l2_normalize": (lambda p: ad.tsum(ad.l2_normalize(p["a"]) * Tensor(np.arange(8.0).reshape(2, 4))), {"a": (2, 4)}),
    "cosine": (lambda p: ad.tsum(ad.cosine_similarity(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
}


class TestGradcheck:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_ops(self, name):
        fn, shapes = OPS[name]
        for seed in range(3):
            rng = np.random.default_rng(seed)
            params = {k: rng.normal(size=s) for k, s in shapes.items()}
            res = ad.gradcheck(fn, params, seed=seed)
            assert res.ok(1e-3), (name, seed, res)

    def test_detects_wrong_gradient(self):
        def bad_square(p):
            x = p["x"]
            sq = ad._make(x.data**2, "square", (x,), lambda g: (g * x.data,))  # true grad is 2x
            return ad.tsum(sq)

        res = ad.gradcheck(bad_square, {"x": np.array([1.0, 2.0, 3.0])})
        assert not res.ok(1e-3)

    def test_stop_gradient_held_constant(self):
        # d/dx sum(sg(x) * x) is sg(x) when sg(x) is a constant
        res = ad.gradcheck(lambda p: ad.tsum(ad.stop_gradient(p["x"]) * p["x"]), {"x": np.array([1.0, 2.0, 3.0])})
        assert res.ok(1e-9)

    def test_rel_error_metric(self):
        np.testing.assert_allclose(ad.rel_error(np.array([0.0, 10.0]), np.array([1e-4, 11.0])), [1e-4, 1 / 11])


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        p = {"w": np.array([1.0, -2.0], np.float32)}
        st = ad.OptState(lr=0.1, weight_decay=0.0)
        ad.adamw_step(p, {"w": np.zeros(2, np.float32)}, st)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st.step == 1

    def test_single_step_oracle(self):
        x0, lr, wd, b1, b2, eps = 2.0, 0.1, 0.02, 0.9, 0.98, 1e-8
        g = 2 * x0  # d/dx x^2
        m, v = (1 - b1) * g, (1 - b2) * g * g
        expected = x0 * (1 - lr * wd) - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        p = {"x": np.array([x0], np.float32)}
        ad.adamw_step(p, {"x": np.array([g], np.float32)}, ad.OptState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, epsilon=eps))
        assert p["x"][0] == pytest.approx(expected, rel=1e-6)

    def test_defaults(self):
        st = ad.OptState()
        assert (st.weight_decay, st.beta1, st.beta2) == (0.02, 0.9, 0.98)

    def test_no_decay_names(self):
        p = {"a": np.ones(1, np.float32), "log_tau": np.ones(1, np.float32)}
        ad.adamw_step(p, {k: np.zeros(1, np.float32) for k in p}, ad.OptState(lr=1.0, weight_decay=0.5), no_decay=["log_tau"])
        assert p["log_tau"][0] == 1.0 and p["a"][0] == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.adamw_step({"w": np.zeros(2, np.float32)}, {"w": np.zeros(3, np.float32)}, ad.OptState())

    def test_quadratic_descends(self):
        A = np.diag([1.0, 4.0, 9.0]).astype(np.float32)
        p = {"x": np.array([3.0, -2.0, 1.0], np.float32)}
        st = ad.OptState(lr=0.05, weight_decay=0.0)
        losses = []
        for _ in range(200):
            x = p["x"]
            losses.append(float(x @ A @ x))
            ad.adamw_step(p, {"x": 2 * A @ x}, st)
        tail = np.array(losses[20:])
        assert losses[-1] < 1e-2 * losses[0]
        assert np.all(np.diff(tail[:60]) <= 1e-6)
        assert st.step == 200
