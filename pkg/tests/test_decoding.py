import itertools

import numpy as np
import pytest

from mtsm.data_pipeline import EOS, synth_scene
from mtsm.decoding import (
    beam_decode,
    beam_search,
    decode_corpus,
    greedy_decode,
    sequence_log_prob,
)
from mtsm.errors import ContractError
from mtsm.transformer import CaptionModel


def all_sequences(vocab_size, max_len):
    """Every complete output: words then EOS, or max_len words without EOS."""
    words = [t for t in range(vocab_size) if t != EOS]
    for n in range(max_len + 1):
        for seq in itertools.product(words, repeat=n):
            yield list(seq), n < max_len


def sharpen(model, factor=8.0):
    """Scale the head so random models produce peaked distributions."""
    model.params["head.W"].data *= factor
    model.params["head.b"].data[:] = np.random.default_rng(0).normal(size=model.config.vocab_size)


class TestGreedy:
    def test_always_eos_gives_empty_caption(self, model, scene):
        model.params["head.W"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.0
        model.params["head.b"].data[EOS] = 5.0
        assert greedy_decode(model, scene) == []

    def test_length_cap(self, model, scene):
        model.params["head.W"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.0
        model.params["head.b"].data[7] = 5.0
        assert greedy_decode(model, scene) == [7] * 51
        assert greedy_decode(model, scene, max_len=4) == [7] * 4

    def test_ties_go_to_lowest_id(self, model, scene):
        model.params["head.W"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.0
        model.params["head.b"].data[[9, 5]] = 3.0
        assert greedy_decode(model, scene, max_len=3) == [5, 5, 5]

    def test_deterministic(self, model, scene):
        assert greedy_decode(model, scene, max_len=6) == greedy_decode(model, scene, max_len=6)

    def test_max_len_bounds(self, model, scene):
        with pytest.raises(ContractError):
            greedy_decode(model, scene, max_len=52)


class TestBeam:
    def test_width_one_is_greedy(self, make_config):
        config = make_config(max_len=8)
        for seed in range(100):
            model = CaptionModel(config, seed=seed)
            sharpen(model, 4.0)
            det, _ = synth_scene([seed, 5], d_feat=32)
            memory = model.encode(det)
            assert beam_decode(model, det, beam_width=1, memory=memory) == greedy_decode(model, det, memory=memory)

    @pytest.mark.parametrize("vocab_size,max_len", [(5, 2), (5, 3)])
    def test_exhaustive_beam_matches_enumeration(self, make_config, vocab_size, max_len):
        config = make_config(vocab_size=vocab_size, max_len=max_len)
        for seed in range(3):
            model = CaptionModel(config, seed=seed)
            sharpen(model, 2.0)
            det, _ = synth_scene([seed, 6], d_feat=32)
            memory = model.encode(det)
            scored = [
                (sequence_log_prob(model, det, words, ends_with_eos, memory), words + ([EOS] if ends_with_eos else []))
                for words, ends_with_eos in all_sequences(vocab_size, max_len)
            ]
            best = max(scored, key=lambda s: s[0])
            width = vocab_size ** max_len
            beam = beam_search(model, det, beam_width=width, memory=memory)
            assert list(beam[0].tokens) == best[1]
            assert beam[0].log_prob == pytest.approx(best[0], abs=1e-12)

            greedy = greedy_decode(model, det, memory=memory)
            greedy_score = sequence_log_prob(model, det, greedy, len(greedy) < max_len, memory)
            assert beam[0].log_prob >= greedy_score - 1e-12

    def test_pool_is_ranked_and_finished(self, model, scene):
        sharpen(model)
        beams = beam_search(model, scene, beam_width=4, max_len=5)
        assert len(beams) == 4
        assert all(b.finished for b in beams)
        scores = [b.log_prob for b in beams]
        assert scores == sorted(scores, reverse=True)
        for b in beams:
            assert b.log_prob <= 0.0
            assert len(b.words()) <= 5
            assert EOS not in b.words()
            if len(b.tokens) < 5:
                assert b.tokens[-1] == EOS

    def test_log_prob_matches_rescoring(self, model, scene):
        sharpen(model)
        best = beam_search(model, scene, beam_width=3, max_len=6)[0]
        ends = bool(best.tokens) and best.tokens[-1] == EOS
        assert best.log_prob == pytest.approx(sequence_log_prob(model, scene, best.words(), ends), abs=1e-12)

    def test_length_penalty_reranks(self, model, scene):
        sharpen(model)
        plain = beam_search(model, scene, beam_width=4, max_len=5)
        normalized = beam_search(model, scene, beam_width=4, max_len=5, length_penalty=1.0)
        keys = [b.log_prob / len(b.tokens) for b in normalized]
        assert keys == sorted(keys, reverse=True)
        assert {b.tokens for b in plain} == {b.tokens for b in normalized}

    def test_invalid_width(self, model, scene):
        with pytest.raises(ContractError):
            beam_decode(model, scene, beam_width=0)


def test_decode_corpus(model):
    scenes = [synth_scene(s, d_feat=32)[0] for s in range(3)]
    greedy = decode_corpus(model, scenes, beam_width=1, max_len=4)
    assert greedy == [greedy_decode(model, d, max_len=4) for d in scenes]
    beams = decode_corpus(model, scenes, beam_width=2, max_len=4)
    assert all(len(ids) <= 4 for ids in beams)
