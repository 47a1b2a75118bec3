import numpy as np
import pytest

from salsum import autodiff as ad
from salsum import training as tr
from salsum.autodiff import ParamStore, Tensor
from salsum.checkpoint import load_checkpoint
from salsum.corpus import TrainingPair
from salsum.model import ModelConfig, init_params
from salsum.training import (
    AdadeltaState,
    TrainConfig,
    adadelta_step,
    nll_loss,
    salience_loss,
    total_loss,
    train,
)


def make_pair(source_ids, target_ids, labels=None, content=None):
    n = len(source_ids)
    return TrainingPair(
        source_ids=list(source_ids),
        target_ids=list(target_ids),
        salience_labels=list(labels) if labels is not None else [0] * n,
        source_tokens=[f"w{i}" for i in source_ids],
        summary_tokens=[f"w{i}" for i in target_ids[:-1]],
        content_mask=list(content) if content is not None else [True] * n,
    )


class TestSalienceLoss:
    def test_half_predictions(self):
        loss = salience_loss(Tensor(np.full(5, 0.5)), [1, 0, 1, 0, 0])
        np.testing.assert_allclose(loss.item(), np.log(2.0), atol=1e-7)

    def test_perfect_prediction(self):
        loss = salience_loss(Tensor(np.array([1.0, 0.0])), [1, 0])
        assert loss.item() <= 1e-6

    def test_hand_value(self):
        loss = salience_loss(Tensor(np.array([0.9, 0.1])), [1, 0])
        np.testing.assert_allclose(loss.item(), 0.10536, atol=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            salience_loss(Tensor(np.array([0.5])), [1, 0])

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            salience_loss(Tensor(np.array([0.5, 0.5])), [1, 2])

    def test_gradient_sign(self):
        r = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        salience_loss(r, [1, 0]).backward()
        assert r.grad[0] < 0 and r.grad[1] > 0


class TestNllLoss:
    def test_uniform(self):
        dists = Tensor(np.full((2, 4), 0.25))
        np.testing.assert_allclose(nll_loss(dists, [0, 3]).item(), 2 * np.log(4.0), atol=1e-6)

    def test_perfect(self):
        d = np.zeros((2, 3))
        d[0, 1] = 1.0
        d[1, 2] = 1.0
        assert nll_loss(Tensor(d), [1, 2]).item() <= 1e-6

    def test_hand_value(self):
        dists = Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))
        np.testing.assert_allclose(nll_loss(dists, [0, 1]).item(), np.log(2) + np.log(4 / 3), atol=1e-6)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nll_loss(Tensor(np.full((1, 3), 1 / 3)), [3])

    def test_accepts_list_of_rows(self):
        rows = [Tensor(np.array([0.5, 0.5])), Tensor(np.array([0.25, 0.75]))]
        np.testing.assert_allclose(nll_loss(rows, [0, 1]).item(), 0.98083, atol=1e-4)


class TestTotalLoss:
    def _setup(self, **kw):
        cfg = ModelConfig(vocab_size=10, k_e=3, k_h=2, **kw)
        params = init_params(cfg, seed=0, dtype=np.float64)
        pair = make_pair([4, 5, 6], [7, 8, 3], labels=[1, 0, 1])
        return cfg, params, pair

    def test_additivity(self):
        cfg, params, pair = self._setup()
        loss, stats = total_loss(pair, params, cfg)
        np.testing.assert_allclose(loss.item(), stats["l_s"] + stats["l_nll"], rtol=1e-12)
        assert stats["n_tokens"] == 3

    def test_nll_only_when_salience_disabled(self):
        cfg, params, pair = self._setup(use_salience_loss=False, use_sup_context=False)
        loss, stats = total_loss(pair, params, cfg)
        assert stats["l_s"] == 0.0
        np.testing.assert_allclose(loss.item(), stats["l_nll"], rtol=1e-12)

    def test_loss_nonnegative(self):
        for seed in range(3):
            cfg = ModelConfig(vocab_size=8, k_e=2, k_h=2)
            params = init_params(cfg, seed=seed, dtype=np.float64)
            loss, _ = total_loss(make_pair([4, 5], [6, 3]), params, cfg)
            assert loss.item() >= 0.0

    def test_grad_check_full_objective(self):
        cfg = ModelConfig(vocab_size=6, k_e=2, k_h=2)
        params = init_params(cfg, seed=1, dtype=np.float64)
        pair = make_pair([4, 5, 4], [5, 3], labels=[1, 0, 1])
        err = ad.grad_check(lambda p: total_loss(pair, p, cfg)[0], params, h=1e-3)
        assert err < 1e-3


class TestAdadelta:
    def test_first_step_hand_value(self):
        params = ParamStore()
        params.add("w", Tensor(np.zeros(3, dtype=np.float64)))
        params["w"].grad = np.ones(3)
        adadelta_step(params, AdadeltaState(params))
        np.testing.assert_allclose(params["w"].data, np.full(3, -0.0044721), atol=1e-7)

    def test_zero_gradient_no_change(self):
        params = ParamStore()
        params.add("w", Tensor(np.array([1.0, 2.0])))
        params["w"].grad = np.zeros(2, dtype=np.float32)
        state = AdadeltaState(params)
        adadelta_step(params, state)
        np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])

    def test_update_opposes_gradient(self):
        rng = np.random.default_rng(0)
        params = ParamStore()
        params.add("w", Tensor(rng.uniform(-1, 1, 16).astype(np.float64)))
        state = AdadeltaState(params)
        for _ in range(5):
            g = rng.uniform(-1, 1, 16)
            g[np.abs(g) < 0.05] = 0.1
            before = params["w"].data.copy()
            params["w"].grad = g
            adadelta_step(params, state)
            moved = params["w"].data - before
            assert (np.sign(moved) == -np.sign(g)).all()
            params.zero_grad()

    def test_nonfinite_gradient_names_parameter(self):
        params = ParamStore()
        params.add("enc.embed", Tensor(np.zeros(2)))
        params["enc.embed"].grad = np.array([np.nan, 1.0], dtype=np.float32)
        with pytest.raises(ad.NonFiniteError, match="enc.embed"):
            adadelta_step(params, AdadeltaState(params))

    def test_missing_grad_skipped(self):
        params = ParamStore()
        params.add("a", Tensor(np.ones(2)))
        params.add("b", Tensor(np.ones(2)))
        params["a"].grad = np.full(2, 0.5, dtype=np.float32)
        adadelta_step(params, AdadeltaState(params))
        np.testing.assert_array_equal(params["b"].data, [1.0, 1.0])
        assert params["a"].data[0] != 1.0

    def test_global_norm_clip(self):
        params = ParamStore()
        params.add("a", Tensor(np.zeros(4, dtype=np.float64)))
        params["a"].grad = np.full(4, 10.0)
        scale = tr.clip_global_norm(params, 5.0)
        np.testing.assert_allclose(scale * 20.0, 5.0, rtol=1e-12)
        params2 = ParamStore()
        params2.add("a", Tensor(np.zeros(4, dtype=np.float64)))
        params2["a"].grad = np.full(4, 0.1)
        assert tr.clip_global_norm(params2, 5.0) == 1.0


class TestTrainLoop:
    def _corpus(self):
        pairs = [
            make_pair([4, 5, 6], [4, 3], labels=[1, 0, 0]),
            make_pair([5, 6, 7], [5, 3], labels=[1, 0, 0]),
            make_pair([6, 7, 4], [6, 3], labels=[1, 0, 0]),
        ]
        cfg = ModelConfig(vocab_size=9, k_e=4, k_h=4)
        return pairs, cfg

    def test_zero_epochs_no_change(self, tmp_path):
        pairs, cfg = self._corpus()
        params = init_params(cfg, seed=0)
        before = {n: t.data.copy() for n, t in params.items()}
        ckpt = str(tmp_path / "m.ckpt")
        result = train(pairs, params, cfg, TrainConfig(epochs=0, checkpoint_path=ckpt))
        for n, t in result.params.items():
            np.testing.assert_array_equal(t.data, before[n])
        loaded = load_checkpoint(ckpt)
        for n in before:
            np.testing.assert_array_equal(loaded[n], before[n])

    def test_fixed_seed_reproducible_logs(self):
        pairs, cfg = self._corpus()
        r1 = train(pairs, init_params(cfg, seed=1), cfg, TrainConfig(epochs=3, seed=5))
        r2 = train(pairs, init_params(cfg, seed=1), cfg, TrainConfig(epochs=3, seed=5))
        assert r1.log_lines == r2.log_lines
        for n, t in r1.params.items():
            assert t.data.tobytes() == r2.params[n].data.tobytes()

    def test_loss_log_format(self):
        pairs, cfg = self._corpus()
        result = train(pairs, init_params(cfg, seed=1), cfg, TrainConfig(epochs=2, seed=5))
        assert len(result.log_lines) == 2
        for i, line in enumerate(result.log_lines, start=1):
            fields = line.split("\t")
            assert len(fields) == 4 and int(fields[0]) == i
            ls, lnll, total = map(float, fields[1:])
            np.testing.assert_allclose(total, ls + lnll, atol=1e-5)

    def test_loss_decreases_on_tiny_corpus(self):
        pairs, cfg = self._corpus()
        result = train(pairs, init_params(cfg, seed=1), cfg, TrainConfig(epochs=30, seed=5))
        first = float(result.log_lines[0].split("\t")[3])
        last = float(result.log_lines[-1].split("\t")[3])
        assert last < first

    def test_validation_selects_best(self):
        pairs, cfg = self._corpus()
        result = train(pairs, init_params(cfg, seed=1), cfg,
                       TrainConfig(epochs=4, seed=5), val_pairs=pairs[:1])
        assert result.params is not None
        assert np.isfinite(result.per_token_nll)

    def test_empty_corpus_rejected(self):
        _, cfg = self._corpus()
        with pytest.raises(ValueError):
            train([], init_params(cfg, seed=0), cfg, TrainConfig(epochs=1))

    def test_disabled_graph_branch_gets_no_gradient(self):
        pairs, _ = self._corpus()
        cfg = ModelConfig(vocab_size=9, k_e=4, k_h=4, use_unsup_context=False)
        params = init_params(cfg, seed=2, dtype=np.float64)
        for pair in pairs:
            params.zero_grad()
            loss, _ = total_loss(pair, params, cfg)
            loss.backward()
            assert params["graph.w_edge"].grad is None

    def test_checkpoint_interval_writes(self, tmp_path):
        pairs, cfg = self._corpus()
        ckpt = str(tmp_path / "m.ckpt")
        train(pairs, init_params(cfg, seed=0), cfg,
              TrainConfig(epochs=2, checkpoint_interval=1, checkpoint_path=ckpt))
        assert (tmp_path / "m.ckpt").exists()
        loaded = load_checkpoint(ckpt)
        assert "dec.out.w" in loaded
