import json
import math

import numpy as np
import pytest

from mtsm.config import build_train_config
from mtsm.data_pipeline import PAD, build_vocab, make_examples, preprocess_caption, synth_corpus
from mtsm.decoding import greedy_decode
from mtsm.errors import ContractError, DegenerateBatchError, NonFiniteGradientError
from mtsm.gradcheck import check_function
from mtsm.tensor import Tensor
from mtsm.training import (
    OptimizerState,
    adam_step,
    batch_loss,
    clip_grad_norm,
    epoch_lr,
    evaluate_loss,
    masked_xe_loss,
    train,
    train_step,
)
from mtsm.transformer import CaptionModel, load_checkpoint


def corpus(num_scenes, seed=0):
    scenes, captions = synth_corpus(num_scenes, seed=seed)
    vocab = build_vocab([preprocess_caption(c.caption) for c in captions], min_count=1)
    return scenes, captions, vocab, make_examples(scenes, captions, vocab)


class TestLoss:
    def test_uniform_logits(self):
        loss = masked_xe_loss(Tensor(np.zeros((3, 8))), [4, 5, 6])
        assert loss.item() == pytest.approx(math.log(8))

    def test_padding_is_ignored(self, rng):
        logits = rng.normal(size=(4, 6))
        full = masked_xe_loss(Tensor(logits[:2]), [3, 4]).item()
        padded = masked_xe_loss(Tensor(logits), [3, 4, PAD, PAD]).item()
        assert padded == pytest.approx(full, abs=1e-12)

    def test_sum_reduction(self, rng):
        logits = Tensor(rng.normal(size=(3, 5)))
        mean = masked_xe_loss(logits, [1, 2, 3]).item()
        assert masked_xe_loss(logits, [1, 2, 3], reduction="sum").item() == pytest.approx(3 * mean)

    def test_all_padding(self):
        with pytest.raises(DegenerateBatchError):
            masked_xe_loss(Tensor(np.zeros((2, 5))), [PAD, PAD])

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        report = check_function(lambda: masked_xe_loss(logits, [2, PAD, 5, 6]), {"logits": logits},
                                max_entries=0)
        assert report.passed


class TestOptimizer:
    def test_schedule(self):
        cfg = build_train_config(base_lr=1e-3, lr_decay_gamma=0.5)
        assert [epoch_lr(e, cfg) for e in range(3)] == [1e-3, 5e-4, 2.5e-4]
        with pytest.raises(ContractError):
            epoch_lr(-1, cfg)

    def test_first_adam_step_moves_by_lr(self, model):
        state = OptimizerState.fresh(model.params)
        before = model.params["head.b"].data.copy()
        grads = {"head.b": np.linspace(-1.0, 1.0, 12) + 0.05}
        adam_step(model.params, grads, state, lr=0.01)
        g = grads["head.b"]
        np.testing.assert_allclose(model.params["head.b"].data, before - 0.01 * g / (np.abs(g) + 1e-8))
        assert state.step == 1

    def test_non_finite_gradient_aborts_step(self, model):
        state = OptimizerState.fresh(model.params)
        before = model.params.state_dict()
        grads = {"head.b": np.zeros(12), "head.W": np.full((16, 12), np.nan)}
        with pytest.raises(NonFiniteGradientError) as err:
            adam_step(model.params, grads, state, lr=0.01)
        assert err.value.parameter == "head.W"
        assert state.step == 0
        assert all(np.array_equal(before[n], t.data) for n, t in model.params.items())

    def test_clip(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0, 4.0]])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.0])
        np.testing.assert_allclose(grads["b"], [[0.0, 0.8]])


class TestTrainLoop:
    def test_batch_loss_weights_tokens(self, make_config):
        _, _, vocab, examples = corpus(3)
        model = CaptionModel(make_config(vocab_size=len(vocab)))
        pooled = batch_loss(model, examples[:2]).item()
        parts = [masked_xe_loss(model.forward(ex.det, ex.inputs), ex.targets, reduction="sum").item()
                 for ex in examples[:2]]
        tokens = sum(len(ex.targets) for ex in examples[:2])
        assert pooled == pytest.approx(sum(parts) / tokens)
        with pytest.raises(DegenerateBatchError):
            batch_loss(model, [])

    def test_one_epoch_on_one_example_lowers_its_loss(self, make_config):
        _, _, vocab, examples = corpus(1)
        model = CaptionModel(make_config(vocab_size=len(vocab)))
        before = evaluate_loss(model, examples[:1])
        train(model, examples[:1], build_train_config(epochs=1, base_lr=1e-4, batch_size=1), vocab)
        assert evaluate_loss(model, examples[:1]) < before

    def test_loss_decreases(self, make_config):
        _, _, vocab, examples = corpus(4)
        model = CaptionModel(make_config(vocab_size=len(vocab)))
        cfg = build_train_config(epochs=15, base_lr=3e-3, lr_decay_gamma=1.0, batch_size=2)
        ckpt = train(model, examples, cfg, vocab)
        assert ckpt.epoch == 15
        assert ckpt.loss_history[-1] < 0.8 * ckpt.loss_history[0]

    def test_log_and_checkpoint_files(self, make_config, tmp_path):
        _, _, vocab, examples = corpus(2)
        model = CaptionModel(make_config(vocab_size=len(vocab)))
        cfg = build_train_config(epochs=3, base_lr=1e-3, batch_size=2, checkpoint_every=2)
        train(model, examples, cfg, vocab, checkpoint_path=tmp_path / "m.npz", log_path=tmp_path / "log.jsonl")
        lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [l["epoch"] for l in lines] == [0, 1, 2]
        assert set(lines[0]) == {"epoch", "mean_loss", "lr", "wall_seconds", "rss_mb"}
        assert load_checkpoint(tmp_path / "m.npz").epoch == 3

    def test_resume_reproduces_uninterrupted_run(self, make_config, tmp_path):
        _, _, vocab, examples = corpus(5)
        config = make_config(vocab_size=len(vocab), dropout_rate=0.1)
        cfg = build_train_config(epochs=4, base_lr=2e-3, batch_size=2, seed=3)

        straight = train(CaptionModel(config, seed=3), examples, cfg, vocab)

        half = build_train_config(**{**cfg.model_dump(), "epochs": 2})
        train(CaptionModel(config, seed=3), examples, half, vocab, checkpoint_path=tmp_path / "half.npz")
        resume = load_checkpoint(tmp_path / "half.npz")
        resumed = train(resume.to_model(), examples, cfg, vocab, resume=resume)

        assert resumed.loss_history == straight.loss_history
        for name, arr in straight.params.items():
            assert np.array_equal(resumed.params[name], arr), name

    def test_guards(self, make_config):
        _, _, vocab, examples = corpus(1)
        cfg = build_train_config(epochs=1)
        with pytest.raises(ContractError):
            train(CaptionModel(make_config(vocab_size=len(vocab))), [], cfg, vocab)
        with pytest.raises(ContractError):
            train(CaptionModel(make_config(vocab_size=len(vocab) + 1)), examples, cfg, vocab)


@pytest.mark.slow
def test_fixed_batch_loss_is_mostly_monotone(make_config):
    _, _, vocab, examples = corpus(2)
    monotone = 0
    for seed in range(20):
        model = CaptionModel(make_config(vocab_size=len(vocab)), seed=seed)
        state = OptimizerState.fresh(model.params)
        # each early Adam step moves a weight by about lr; keep that in the first-order regime
        losses = [train_step(model, examples, state, lr=1e-5) for _ in range(50)]
        losses.append(evaluate_loss(model, examples))
        monotone += all(b <= a for a, b in zip(losses, losses[1:]))
    assert monotone >= 19


@pytest.mark.slow
def test_tiny_model_overfits_synthetic_scenes(make_config):
    scenes, captions, vocab, examples = corpus(64, seed=0)
    model = CaptionModel(make_config(vocab_size=len(vocab)), seed=0)
    cfg = build_train_config(epochs=300, base_lr=3e-3, lr_decay_gamma=0.995, batch_size=4, seed=0)
    ckpt = train(model, examples, cfg, vocab)
    assert min(ckpt.loss_history) < 0.1
    exact = sum(greedy_decode(model, ex.det) == ex.words for ex in examples)
    assert exact >= 0.9 * len(examples)
