import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvox import tensor as T
from polyvox.errors import ContractError
from polyvox.nn import ParamStore
from polyvox.optim import AdamW, AdamWConfig, load_checkpoint, save_checkpoint
from polyvox.tensor import Tensor, backward


def finite_difference_check(make_loss, params, h=1e-5, tol=1e-4):
    """Central differences against reverse-mode gradients, elementwise."""
    loss = make_loss()
    grads = backward(loss)
    for p in params:
        g = grads.get(p)
        analytic = (g if g is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(make_loss().data)
            flat[i] = orig - h
            down = float(make_loss().data)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            rel = abs(analytic[i] - fd) / max(abs(analytic[i]), abs(fd), 1e-6)
            assert rel < tol, f"param grad mismatch: {analytic[i]} vs {fd}"


class TestPrimitives:
    def test_matmul_shape(self):
        out = T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        assert out.shape == (2, 4)

    def test_matmul_mismatch_mentions_shapes(self):
        with pytest.raises(ContractError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_softmax_rows_sum_to_one(self):
        y = T.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 9))))
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-12)

    def test_mse_self_gradient_zero(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
        loss = T.mse_loss(x, x)
        grads = backward(loss)
        assert not np.any(grads.get(x, np.zeros(1)))

    def test_linear_loss_gradient(self):
        w = np.array([2.0, -3.0, 0.5])
        x = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
        loss = T.sum_(Tensor(w) * x)
        grads = backward(loss)
        assert np.allclose(grads[x], w)

    def test_unused_parameter_gradient_is_zero(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        grads = backward(T.sum_(used * 2.0))
        assert unused not in grads and unused.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_gelu_values(self):
        y = T.gelu(Tensor(np.array([0.0, 100.0, -100.0])))
        assert np.allclose(y.data, [0.0, 100.0, 0.0], atol=1e-6)

    def test_embedding_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = T.embedding_lookup(table, [1, 1, 3])
        assert out.shape == (3, 3)
        grads = backward(T.sum_(out))
        assert np.allclose(grads[table][1], 2.0)
        with pytest.raises(ContractError):
            T.embedding_lookup(table, [4])

    def test_concat_slice_roundtrip_grads(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        joined = T.concat([a, b], axis=1)
        piece = T.slice_(joined, (slice(None), slice(0, 3)))
        grads = backward(T.sum_(piece))
        assert np.allclose(grads[a], 1.0)
        assert b not in grads or not np.any(grads.get(b, np.zeros(1)))

    def test_loss_shape_mismatch(self):
        with pytest.raises(ContractError):
            T.l1_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))

    def test_cross_entropy_matches_manual(self):
        logits = np.random.default_rng(2).normal(size=(6, 4))
        labels = np.array([0, 1, 2, 3, 0, 1])
        out = T.cross_entropy(Tensor(logits), labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        manual = -np.log(p[np.arange(6), labels]).mean()
        assert out.data == pytest.approx(manual)


class TestGradientCorrectness:
    def test_three_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        store = ParamStore(rng)
        w1 = store.xavier("w1", 4, 8)
        b1 = store.zeros("b1", (8,))
        w2 = store.xavier("w2", 8, 8)
        b2 = store.zeros("b2", (8,))
        w3 = store.xavier("w3", 8, 2)
        x = Tensor(rng.normal(size=(5, 4)))
        y = Tensor(rng.normal(size=(5, 2)))

        def loss():
            T.zero_grads(store.params.values())
            h1 = T.gelu(T.matmul(x, w1) + b1)
            h2 = T.gelu(T.matmul(h1, w2) + b2)
            return T.mse_loss(T.matmul(h2, w3), y)

        finite_difference_check(loss, list(store.params.values()))

    @pytest.mark.parametrize("seed", [11, 12, 13])
    def test_random_composed_networks(self, seed):
        """3-5 layers drawn from the primitive set, FD-checked end to end."""
        rng = np.random.default_rng(seed)
        store = ParamStore(rng)
        dims = [6] + [int(rng.integers(4, 9)) for _ in range(int(rng.integers(3, 6)))]
        x = Tensor(rng.normal(size=(4, dims[0])))
        target = Tensor(rng.normal(size=(4, dims[-1])))
        gains = [store.ones(f"g{i}", (d,)) for i, d in enumerate(dims[1:])]
        biases = [store.zeros(f"bn{i}", (d,)) for i, d in enumerate(dims[1:])]
        weights = [store.xavier(f"w{i}", a, b) for i, (a, b) in enumerate(zip(dims, dims[1:]))]

        def loss():
            T.zero_grads(store.params.values())
            h = x
            for i, w in enumerate(weights):
                h = T.matmul(h, w)
                kind = (seed + i) % 3
                if kind == 0:
                    h = T.gelu(h)
                elif kind == 1:
                    h = T.layer_norm(h, gains[i], biases[i])
                else:
                    h = T.softmax(h) + h
            return T.l1_loss(h, target)

        finite_difference_check(loss, list(store.params.values()))

    def test_broadcast_add_mul_grads(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 4)), requires_grad=True)

        def loss():
            T.zero_grads([a, b])
            return T.mean((a + b) * b)

        finite_difference_check(loss, [a, b])


class TestOptimizer:
    def test_zero_gradients_leave_params(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = AdamW({"p": p}, AdamWConfig(weight_decay=0.0))
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_lr_hits_floor_at_horizon(self):
        cfg = AdamWConfig(peak_lr=1e-4, min_lr=1e-5, total_steps=1234)
        opt = AdamW({}, cfg)
        assert opt.lr_at(0) == pytest.approx(1e-4)
        assert opt.lr_at(1234) == 1e-5
        assert opt.lr_at(5000) == 1e-5

    @given(st.integers(min_value=0, max_value=20000))
    @settings(max_examples=50, deadline=None)
    def test_lr_bounded_and_monotone(self, step):
        opt = AdamW({}, AdamWConfig(peak_lr=1e-4, min_lr=1e-5, total_steps=10000))
        lr = opt.lr_at(step)
        assert 1e-5 <= lr <= 1e-4
        assert opt.lr_at(step + 1) <= lr

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = AdamW({"p": p}, AdamWConfig(peak_lr=1e-4, min_lr=1e-6, total_steps=100,
                                          weight_decay=0.0))
        p.grad = np.array([1.0])
        opt.step()
        # bias-corrected Adam: first update is lr * g/(|g| + eps)
        assert p.data[0] == pytest.approx(-1e-4, rel=1e-6)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"p": p}, AdamWConfig(peak_lr=1e-2, min_lr=1e-3, total_steps=10,
                                          weight_decay=0.1))
        p.grad = np.array([0.0])
        opt.step()
        # no gradient: only the decay term applies
        assert p.data[0] == pytest.approx(1.0 - 1e-2 * 0.1 * 1.0)

    def test_non_finite_gradient_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"p": p}, AdamWConfig())
        p.grad = np.array([np.nan])
        with pytest.raises(ContractError, match="p"):
            opt.step()

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(3)
            p = Tensor(np.ones(4), requires_grad=True)
            opt = AdamW({"p": p}, AdamWConfig(peak_lr=1e-3, min_lr=1e-4, total_steps=50))
            data = rng.normal(size=(50, 4))
            for i in range(50):
                T.zero_grads([p])
                backward(T.mse_loss(p * Tensor(np.ones(4)), Tensor(data[i])))
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = {
            "enc.w": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
            "enc.b": np.zeros(4, dtype=np.float32),
        }
        path = tmp_path / "c.pvck"
        save_checkpoint(path, params, step=17, config={"dim": 4})
        back, step, header = load_checkpoint(path)
        assert step == 17
        assert header["config"] == {"dim": 4}
        assert np.array_equal(back["enc.w"].astype(np.float32), params["enc.w"])
        assert path.read_bytes()[:4] == b"PVCK"

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "c.pvck"
        save_checkpoint(path, {"w": np.ones((4, 4))}, 0, {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ContractError):
            load_checkpoint(path)
