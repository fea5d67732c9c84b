from dataclasses import replace

import numpy as np
import pytest

import rankfsl.model as model_mod
from rankfsl.classifier import ClassifierConfig
from rankfsl.data import DataError, LabeledFeatureSet
from rankfsl.episode import (EpisodeConfig, EpisodeGrads, episode_loss, episode_loss_and_grads,
                             sample_episode)
from rankfsl.metrics import MetricSpec
from rankfsl.model import (LinearEmbedder, LinearHead, NumericalAbort, TrainConfig, TrainLog,
                           checkpoint_text, embed, embed_backward, load_checkpoint, parse_checkpoint,
                           pretrain_ce, save_checkpoint, train_meta)

from conftest import blob_dataset, central_difference, relative_error


def chain_gradients(model, task, cfg):
    """Analytic (dW, db) of the episode loss through the embedder."""
    _, g_s, g_q = episode_loss_and_grads(task, model, cfg)
    dw_s, db_s = embed_backward(model, task.support, g_s)
    dw_q, db_q = embed_backward(model, task.query, g_q)
    return dw_s + dw_q, db_s + db_q


class TestEmbed:
    def test_identity(self):
        x = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(embed(LinearEmbedder.identity(3), x), x)

    def test_zero_weight(self):
        m = LinearEmbedder(np.zeros((2, 3)), np.array([4.0, -1.0]))
        np.testing.assert_array_equal(m(np.array([[1, 2, 3], [4, 5, 6]])), [[4, -1], [4, -1]])

    def test_rectify(self):
        m = LinearEmbedder(np.eye(2), np.zeros(2), rectify=True)
        np.testing.assert_array_equal(m([-1.0, 2.0]), [0.0, 2.0])

    def test_validation(self):
        with pytest.raises(ValueError, match=">= 2"):
            LinearEmbedder(np.ones((1, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="inconsistent"):
            LinearEmbedder(np.ones((2, 3)), np.zeros(3))
        with pytest.raises(ValueError, match="finite"):
            LinearEmbedder(np.full((2, 2), np.nan), np.zeros(2))
        with pytest.raises(ValueError, match="input dimension"):
            LinearEmbedder.identity(3)(np.ones(4))

    def test_parameters_read_only(self):
        m = LinearEmbedder.identity(2)
        with pytest.raises(ValueError):
            m.weight[0, 0] = 3.0


class TestEmbedBackward:
    def test_zero_upstream(self):
        m = LinearEmbedder.random(4, 3, seed=0)
        dw, db = embed_backward(m, np.ones(4), np.zeros(3))
        np.testing.assert_array_equal(dw, 0.0)
        np.testing.assert_array_equal(db, 0.0)

    def test_scalar_chain_rule(self):
        # d_out must be >= 2, so check the 1x1 case on the diagonal of a 2x2 model
        m = LinearEmbedder(np.array([[0.7, 0.0], [0.0, 1.0]]), np.zeros(2))
        dw, db = embed_backward(m, np.array([3.0, 0.0]), np.array([2.0, 0.0]))
        assert dw[0, 0] == 6.0 and db[0] == 2.0

    def test_rectify_gate(self):
        m = LinearEmbedder(np.eye(2), np.array([0.0, -5.0]), rectify=True)
        dw, db = embed_backward(m, np.array([1.0, 1.0]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(db, [1.0, 0.0])
        np.testing.assert_array_equal(dw, [[1.0, 1.0], [0.0, 0.0]])

    def test_shape_check(self):
        with pytest.raises(ValueError, match="upstream"):
            embed_backward(LinearEmbedder.identity(3), np.ones(3), np.ones(2))

    def test_linear_readout_finite_differences(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((5, 4))
        up = rng.standard_normal((5, 3))
        m = LinearEmbedder.random(4, 3, seed=1)
        dw, db = embed_backward(m, raw, up)
        f_w = lambda w: float(np.sum(LinearEmbedder(w, m.bias)(raw) * up))
        f_b = lambda b: float(np.sum(LinearEmbedder(m.weight, b)(raw) * up))
        assert relative_error(dw, central_difference(f_w, m.weight)) < 1e-8
        assert relative_error(db, central_difference(f_b, m.bias)) < 1e-8

    @pytest.mark.parametrize("case", range(40))
    def test_episode_chain_finite_differences(self, case):
        rng = np.random.default_rng(500 + case)
        d_in, d_out = 6, int(rng.integers(3, 6))
        ds = blob_dataset(4, 6, d_in, 4.0, seed=case)  # overlapping classes keep the loss O(1)
        task = sample_episode(ds, EpisodeConfig(int(rng.integers(2, 5)), int(rng.integers(1, 3)), 2), seed=case)
        m = LinearEmbedder.random(d_in, d_out, seed=case, scale=0.3, rectify=case % 4 == 3)
        cfg = ClassifierConfig(MetricSpec.kendall_smooth(float(rng.uniform(0.3, 1.0))), 10.0)
        dw, db = chain_gradients(m, task, cfg)
        num_w = central_difference(lambda w: episode_loss(task, LinearEmbedder(w, m.bias, m.rectify), cfg), m.weight)
        num_b = central_difference(lambda b: episode_loss(task, LinearEmbedder(m.weight, b, m.rectify), cfg), m.bias)
        assert relative_error(dw, num_w) < 1e-5
        assert relative_error(db, num_b) < 1e-5


class TestPretrain:
    def test_separable_two_class(self):
        ds = blob_dataset(2, 100, 5, 0.3, seed=3)
        cfg = TrainConfig(learning_rate=0.1, episodes=300, seed=0, batch_size=32)
        trained, head = pretrain_ce(ds, LinearEmbedder.random(5, 4, seed=0), None, cfg, return_head=True)
        pred = np.argmax(head.logits(trained(ds.features)), axis=1)
        truth = np.array([ds.classes.index(l) for l in ds.labels])
        assert np.mean(pred == truth) >= 0.99

    def test_zero_learning_rate(self):
        ds = blob_dataset(3, 10, 5, 0.3, seed=0)
        m = LinearEmbedder.random(5, 4, seed=2)
        out = pretrain_ce(ds, m, None, TrainConfig(learning_rate=0.0, episodes=20))
        assert out.equals(m)

    def test_deterministic(self):
        ds = blob_dataset(3, 10, 5, 0.3, seed=0)
        m = LinearEmbedder.random(5, 4, seed=2)
        cfg = TrainConfig(learning_rate=0.05, episodes=30, seed=4, batch_size=8)
        assert pretrain_ce(ds, m, None, cfg).equals(pretrain_ce(ds, m, None, cfg))
        assert not pretrain_ce(ds, m, None, replace(cfg, seed=5)).equals(pretrain_ce(ds, m, None, cfg))

    def test_explicit_head(self):
        ds = blob_dataset(3, 10, 5, 0.3, seed=0)
        m = LinearEmbedder.random(5, 4, seed=2)
        pretrain_ce(ds, m, LinearHead.zeros(3, 4), TrainConfig(episodes=2))
        with pytest.raises(ValueError, match="head shape"):
            pretrain_ce(ds, m, LinearHead.zeros(2, 4), TrainConfig(episodes=2))

    def test_empty(self):
        empty = LabeledFeatureSet((), np.empty((0, 5)))
        with pytest.raises(DataError, match="empty"):
            pretrain_ce(empty, LinearEmbedder.identity(5), None, TrainConfig())

    def test_divergence_aborts(self):
        ds = blob_dataset(3, 10, 5, 0.3, seed=0)
        with pytest.raises(NumericalAbort) as info:
            pretrain_ce(ds, LinearEmbedder.random(5, 4, seed=2), None,
                        TrainConfig(learning_rate=1e300, episodes=50, batch_size=8))
        assert info.value.last_finite_loss is None or np.isfinite(info.value.last_finite_loss)


class TestTrainMeta:
    def test_zero_learning_rate_logs_untrained_losses(self, small_synthetic):
        base, _ = small_synthetic
        m = LinearEmbedder.random(base.dim, 8, seed=0)
        cfg = TrainConfig(learning_rate=0.0, episodes=6, seed=3)
        out, log = train_meta(base, None, m, cfg)
        assert out.equals(m)
        smooth = ClassifierConfig(MetricSpec.kendall_smooth(cfg.alpha), cfg.temperature)
        expected = [episode_loss(sample_episode(base, cfg.econfig, (3, 0, i)), m, smooth) for i in range(6)]
        np.testing.assert_allclose(log.losses, expected, rtol=1e-13)

    def test_loss_decreases_on_separable_base(self):
        base = blob_dataset(10, 20, 12, 1.5, seed=7)
        m = LinearEmbedder.random(12, 8, seed=0)
        _, log = train_meta(base, None, m, TrainConfig())  # default: 500 episodes, lr 0.05
        assert len(log.losses) == 500
        assert np.mean(log.losses[-100:]) < np.mean(log.losses[:100])

    def test_small_step_does_not_increase_loss(self, small_synthetic):
        base, _ = small_synthetic
        m = LinearEmbedder.random(base.dim, 8, seed=1)
        smooth = ClassifierConfig(MetricSpec.kendall_smooth(0.5), 10.0)
        for i in range(20):
            task = sample_episode(base, EpisodeConfig(), (9, 0, i))
            before = episode_loss(task, m, smooth)
            dw, db = chain_gradients(m, task, smooth)
            stepped = LinearEmbedder(m.weight - 1e-5 * dw, m.bias - 1e-5 * db)
            assert episode_loss(task, stepped, smooth) <= before

    def test_deterministic(self, small_synthetic):
        base, novel = small_synthetic
        m = LinearEmbedder.random(base.dim, 8, seed=0)
        cfg = TrainConfig(learning_rate=0.2, episodes=15, seed=2, eval_every=5, eval_tasks=10)
        a_model, a_log = train_meta(base, novel, m, cfg)
        b_model, b_log = train_meta(base, novel, m, cfg, threads=4)
        assert a_model.equals(b_model)
        assert a_log.losses == b_log.losses and a_log.evals == b_log.evals
        assert a_log.snapshot == b_log.snapshot == model_mod.hashlib.sha256(
            checkpoint_text(a_model).encode()).hexdigest()

    def test_eval_schedule_and_csv(self, small_synthetic):
        base, novel = small_synthetic
        cfg = TrainConfig(learning_rate=0.1, episodes=12, eval_every=5, eval_tasks=4)
        _, log = train_meta(base, novel, LinearEmbedder.random(base.dim, 6, seed=0), cfg)
        assert [e for e, _ in log.evals] == [0, 5, 10, 12]
        lines = log.to_csv().splitlines()
        assert lines[0] == "episode,loss,eval_accuracy,eval_ci95"
        assert len(lines) == 1 + 12 + 1
        assert lines[-1].startswith("12,,")
        assert lines[6].split(",")[2] != "" and lines[2].split(",")[2] == ""

    def test_non_finite_loss_aborts(self, small_synthetic, monkeypatch):
        base, _ = small_synthetic
        calls = []

        def fake(task, embed, config):
            calls.append(1)
            loss = 0.7 if len(calls) < 4 else float("nan")
            return EpisodeGrads(loss, np.zeros((len(task.support), 6)), np.zeros((len(task.query), 6)))

        monkeypatch.setattr(model_mod, "episode_loss_and_grads", fake)
        with pytest.raises(NumericalAbort, match="episode 3") as info:
            train_meta(base, None, LinearEmbedder.random(base.dim, 6, seed=0), TrainConfig(episodes=10))
        assert info.value.last_finite_loss == 0.7

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=0.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(eval_tasks=0)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        m = LinearEmbedder(np.random.default_rng(0).standard_normal((3, 5)) * 1e-7, np.array([1e300, -0.0, 1 / 3]),
                           rectify=True)
        path = tmp_path / "m.txt"
        save_checkpoint(m, path, provenance="run_config={}\nsecond line")
        text = path.read_text()
        assert text.startswith("# rankfsl-linear-embedder v1\n# run_config={}\n# second line\n")
        assert load_checkpoint(path).equals(m)

    @pytest.mark.parametrize("mutate", [
        lambda t: t.replace("d_out 2", "d_out 3"),
        lambda t: t.replace("weight\n", "weights\n"),
        lambda t: t.replace("nonlinearity none", "nonlinearity tanh"),
        lambda t: t.replace("0.5", "abc"),
        lambda t: "\n".join(t.splitlines()[:-1]),
    ])
    def test_malformed(self, mutate):
        text = checkpoint_text(LinearEmbedder(np.array([[0.5, 1.0], [2.0, 3.0]]), np.zeros(2)))
        with pytest.raises(DataError, match="checkpoint"):
            parse_checkpoint(mutate(text))

    def test_train_log_default(self):
        assert TrainLog().to_csv() == "episode,loss,eval_accuracy,eval_ci95\n"
