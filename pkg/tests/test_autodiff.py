import zlib

import numpy as np
import pytest

from salsum import autodiff as ad
from salsum.autodiff import (
    MaskError,
    ParamStore,
    ShapeMismatchError,
    SingularMatrixError,
    Tensor,
    grad_check,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2))
        b = t64([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_product(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[5.0], [6.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        a = t64(np.ones((2, 3)))
        b = t64(np.ones((2, 3)))
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(a, b)

    def test_backward_accumulates_both_sides(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = t64([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        ad.tensor_sum(ad.matmul(a, b)).backward()
        # d sum(AB)/dA = 1 @ B^T, d/dB = A^T @ 1
        np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))


class TestSoftmax:
    def test_uniform(self):
        y = ad.softmax(t64([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-12)

    def test_analytic(self):
        y = ad.softmax(t64([np.log(2.0), 0.0]))
        np.testing.assert_allclose(y.data, [2 / 3, 1 / 3], atol=1e-12)

    def test_masked(self):
        y = ad.softmax(t64([5.0, 1.0, 9.0]), mask=[True, False, True])
        e5, e9 = np.exp(5.0), np.exp(9.0)
        np.testing.assert_allclose(y.data, [e5 / (e5 + e9), 0.0, e9 / (e5 + e9)], atol=1e-12)

    def test_all_masked_rejected(self):
        with pytest.raises(MaskError):
            ad.softmax(t64([1.0, 2.0]), mask=[False, False])

    def test_sums_to_one_extreme_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = t64(rng.uniform(-500, 500, size=7))
            mask = rng.random(7) < 0.6
            if not mask.any():
                mask[0] = True
            y = ad.softmax(x, mask=mask)
            assert abs(y.data.sum() - 1.0) < 1e-6
            assert (y.data >= 0).all()
            assert (y.data[~mask] == 0.0).all()

    def test_masked_positions_get_zero_gradient(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        y = ad.softmax(x, mask=[True, False, True])
        ad.tensor_sum(ad.mul(y, y)).backward()
        assert x.grad[1] == 0.0


class TestLinearSolve:
    def test_identity_system(self):
        x = ad.linear_solve(t64(np.eye(3)), t64([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(x.data, [1.0, 2.0, 3.0], atol=1e-14)

    def test_identity_gradient_passthrough(self):
        b = t64([1.0, 2.0, 3.0], requires_grad=True)
        x = ad.linear_solve(t64(np.eye(3)), b)
        ad.tensor_sum(x).backward()
        np.testing.assert_allclose(b.grad, np.ones(3), atol=1e-14)

    def test_diagonal(self):
        x = ad.linear_solve(t64([[2.0, 0.0], [0.0, 4.0]]), t64([2.0, 4.0]))
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-14)

    def test_residual_oracle_8x8(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-1, 1, size=(8, 8)) + 8.0 * np.eye(8)
        b = rng.uniform(-1, 1, size=8)
        x = ad.linear_solve(t64(a), t64(b))
        assert np.abs(a @ x.data - b).max() < 1e-10

    def test_residual_invariant_conditioned(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            a = rng.uniform(-1, 1, size=(n, n)) + n * np.eye(n)
            b = rng.uniform(-1, 1, size=n)
            x = ad.linear_solve(t64(a), t64(b))
            assert np.abs(a @ x.data - b).max() <= 1e-8 * max(np.abs(b).max(), 1e-30)

    def test_singular_rejected(self):
        a = t64([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(SingularMatrixError):
            ad.linear_solve(a, t64([1.0, 1.0]))


class TestGradCheck:
    def test_sum_of_squares(self):
        params = ParamStore()
        params.add("x", t64([1.0, 2.0]))
        err = grad_check(lambda p: ad.tensor_sum(ad.mul(p["x"], p["x"])), params, h=1e-4)
        assert err < 1e-7
        np.testing.assert_allclose(params["x"].grad, [2.0, 4.0], atol=1e-12)

    def test_linear_solve_chain(self):
        rng = np.random.default_rng(3)
        params = ParamStore()
        params.add("a", t64(rng.uniform(-1, 1, size=(4, 4)) + 4 * np.eye(4)))
        params.add("b", t64(rng.uniform(-1, 1, size=4)))
        err = grad_check(lambda p: ad.tensor_sum(ad.linear_solve(p["a"], p["b"])), params, h=1e-4)
        assert err < 1e-5

    def test_nonfinite_objective_propagates(self):
        params = ParamStore()
        params.add("x", t64([-1.0]))
        with pytest.raises(ad.NonFiniteError):
            grad_check(lambda p: ad.tensor_sum(ad.log(p["x"])), params)


def _random_unit(rng, shape):
    return t64(rng.uniform(-1, 1, size=shape))


OP_CASES = {
    "add": lambda p: ad.tensor_sum(ad.mul(ad.add(p["a"], p["b"]), p["a"])),
    "sub": lambda p: ad.tensor_sum(ad.mul(ad.sub(p["a"], p["b"]), p["b"])),
    "mul": lambda p: ad.tensor_sum(ad.mul(p["a"], p["b"])),
    "div": lambda p: ad.tensor_sum(ad.div(p["a"], ad.add(p["b"], ad.tensor(np.full((3, 4), 3.0))))),
    "matmul": lambda p: ad.tensor_sum(ad.matmul(p["a"], ad.transpose(p["b"]))),
    "sigmoid": lambda p: ad.tensor_sum(ad.sigmoid(p["a"])),
    "tanh": lambda p: ad.tensor_sum(ad.tanh(p["a"])),
    "softplus": lambda p: ad.tensor_sum(ad.softplus(p["a"])),
    "softmax": lambda p: ad.tensor_sum(ad.mul(ad.softmax(p["a"]), p["a"])),
    "concat": lambda p: ad.tensor_sum(ad.mul(ad.concat([p["a"], p["b"]], axis=1), ad.concat([p["b"], p["a"]], axis=1))),
    "mean_rows": lambda p: ad.tensor_sum(ad.mul(ad.mean_rows(p["a"]), ad.mean_rows(p["b"]))),
    "take_rows": lambda p: ad.tensor_sum(ad.mul(ad.take_rows(p["a"], [2, 0, 2]), ad.take_rows(p["b"], [1, 1, 0]))),
    "gather": lambda p: ad.tensor_sum(ad.gather(p["a"], [3, 0, 2])),
    "reshape": lambda p: ad.tensor_sum(ad.mul(ad.reshape(p["a"], (4, 3)), ad.reshape(p["b"], (4, 3)))),
    "transpose": lambda p: ad.tensor_sum(ad.mul(ad.transpose(p["a"]), ad.transpose(p["b"]))),
    "log": lambda p: ad.tensor_sum(ad.log(ad.add(ad.mul(p["a"], p["a"]), ad.tensor(np.full((3, 4), 1.5))))),
    "scatter": lambda p: ad.tensor_sum(ad.mul(ad.scatter(ad.gather(p["a"], [0, 1, 2]), [5, 0, 3], 7), ad.tensor(np.arange(7.0)))),
    "sum_axis": lambda p: ad.tensor_sum(ad.mul(ad.tensor_sum(p["a"], axis=0), ad.tensor_sum(p["b"], axis=0))),
    "broadcast_add_row": lambda p: ad.tensor_sum(ad.tanh(ad.add(p["a"], ad.mean_rows(p["b"])))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = ParamStore()
    params.add("a", _random_unit(rng, (3, 4)))
    params.add("b", _random_unit(rng, (3, 4)))
    err = grad_check(OP_CASES[name], params, h=1e-4)
    assert err < 1e-5, f"{name}: worst relative error {err}"


class TestTensorBasics:
    def test_grad_accumulates_until_zeroed(self):
        x = t64([1.0, 2.0], requires_grad=True)
        ad.tensor_sum(x).backward()
        ad.tensor_sum(x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None

    def test_detach_blocks_gradient(self):
        x = t64([1.0, 2.0], requires_grad=True)
        ad.tensor_sum(ad.mul(x.detach(), x.detach())).backward()
        assert x.grad is None

    def test_no_grad_skips_tape(self):
        x = t64([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_nonfinite_output_is_an_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(t64([0.0]))

    def test_deep_chain_no_recursion_error(self):
        x = t64([0.5], requires_grad=True)
        y = x
        for _ in range(5000):
            y = ad.add(y, x)
        ad.tensor_sum(y).backward()
        np.testing.assert_allclose(x.grad, [5001.0])

    def test_determinism_same_inputs(self):
        def run():
            rng = np.random.default_rng(123)
            a = Tensor(rng.uniform(-1, 1, size=(6, 6)).astype(np.float32), requires_grad=True)
            b = Tensor(rng.uniform(-1, 1, size=(6, 6)).astype(np.float32), requires_grad=True)
            out = ad.tensor_sum(ad.tanh(ad.matmul(a, b)))
            out.backward()
            return out.data.copy(), a.grad.copy()

        (o1, g1), (o2, g2) = run(), run()
        assert o1.tobytes() == o2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestParamStore:
    def test_insertion_order_and_uniqueness(self):
        ps = ParamStore()
        ps.add("b.w", t64([1.0]))
        ps.add("a.w", t64([2.0]))
        assert ps.names() == ["b.w", "a.w"]
        with pytest.raises(ValueError):
            ps.add("a.w", t64([3.0]))

    def test_copy_is_deep(self):
        ps = ParamStore()
        ps.add("w", t64([1.0]))
        dup = ps.copy()
        dup["w"].data[0] = 9.0
        assert ps["w"].data[0] == 1.0
