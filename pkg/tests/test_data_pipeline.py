import json
import logging

import numpy as np
import pytest

from mtsm.data_pipeline import (
    BOS,
    EOS,
    UNK,
    LoadStats,
    SceneObject,
    Vocabulary,
    build_vocab,
    corpus_hash,
    describe_relations,
    filter_detections,
    group_captions,
    load_captions,
    load_detections,
    make_examples,
    preprocess_caption,
    synth_corpus,
    synth_scene,
    write_captions,
    write_detections,
)
from mtsm.errors import EmptyCaptionError, InvalidBoxError, MissingFileError, ParseError, VocabError
from mtsm.models import CaptionLine, DetectionRecord


def record(scores, boxes=None, image_id="img"):
    n = len(scores)
    boxes = boxes or [(0.1 + 0.1 * i, 0.5, 0.1, 0.1) for i in range(n)]
    return DetectionRecord(image_id=image_id, boxes=boxes, scores=scores,
                           features=[[float(i), 1.0] for i in range(n)])


class TestCaptions:
    def test_cleaning(self):
        assert preprocess_caption("A man, riding a HORSE!") == ["a", "man", "riding", "a", "horse"]

    def test_truncation(self):
        assert len(preprocess_caption(" ".join(["word"] * 80))) == 51
        assert preprocess_caption("one two three", max_words=2) == ["one", "two"]

    def test_empty_after_cleaning(self):
        with pytest.raises(EmptyCaptionError):
            preprocess_caption("?! ...")


class TestVocabulary:
    def test_order_and_threshold(self):
        corpus = [["b", "a", "c"], ["a", "b"], ["a", "d"]]
        vocab = build_vocab(corpus, min_count=2)
        assert vocab.tokens == ["a", "b"]
        assert vocab.stoi["a"] == 4 and len(vocab) == 6

    def test_unknown_and_reserved_words_map_to_unk(self):
        vocab = Vocabulary(["cat", "dog"])
        assert vocab.encode(["dog", "zebra", "<bos>"]) == [5, UNK, UNK]
        assert "<pad>" not in vocab and "cat" in vocab

    def test_decode(self):
        vocab = Vocabulary(["cat", "dog"])
        assert vocab.decode([4, 5]) == ["cat", "dog"]
        assert vocab.to_text([BOS, 4, UNK, 5, EOS]) == "cat <unk> dog"
        with pytest.raises(VocabError):
            vocab.decode([6])

    def test_hash_ignores_caption_order(self):
        a = build_vocab([["x", "y"], ["y"]], min_count=1)
        b = build_vocab([["y"], ["y", "x"]], min_count=1)
        assert a.corpus_hash == b.corpus_hash
        assert a.corpus_hash != build_vocab([["x"]], min_count=1).corpus_hash

    def test_file_round_trip(self, tmp_path):
        vocab = build_vocab([["red", "square"], ["red"]], min_count=1)
        loaded = Vocabulary.load(vocab.save(tmp_path / "vocab.txt"))
        assert loaded.itos == vocab.itos
        assert loaded.min_count == 1 and loaded.corpus_hash == vocab.corpus_hash

    def test_missing_header(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("red\nsquare\n")
        with pytest.raises(ParseError, match="vocab.txt:1"):
            Vocabulary.load(path)


class TestDetections:
    def test_threshold_then_cap_keeps_record_order(self):
        stats = LoadStats()
        det = filter_detections(record([0.9, 0.5, 0.8, 0.95, 0.71]), min_score=0.7, max_objects=3, stats=stats)
        np.testing.assert_array_equal(det.scores, [0.9, 0.8, 0.95])
        np.testing.assert_array_equal(det.features[:, 0], [0, 2, 3])
        assert stats.boxes_dropped_by_score == 1 and stats.boxes_dropped_by_cap == 1

    def test_cap_ties_go_to_earlier_boxes(self):
        det = filter_detections(record([0.8, 0.8, 0.8]), max_objects=2)
        np.testing.assert_array_equal(det.features[:, 0], [0, 1])

    def test_nothing_survives(self):
        assert filter_detections(record([0.2, 0.3])) is None

    def test_invalid_box(self):
        with pytest.raises(InvalidBoxError):
            filter_detections(record([0.9], boxes=[(0.5, 0.5, 0.0, 0.2)]))

    def test_low_scoring_invalid_box_is_ignored(self):
        det = filter_detections(record([0.9, 0.1], boxes=[(0.5, 0.5, 0.2, 0.2), (0.5, 0.5, -1.0, 0.2)]))
        assert det.num_objects == 1

    def test_file_round_trip_is_exact(self, tmp_path):
        scenes, _ = synth_corpus(5, seed=2)
        path = write_detections(tmp_path / "det.jsonl", scenes)
        loaded = list(load_detections(path))
        assert [d.image_id for d in loaded] == [d.image_id for d in scenes]
        for a, b in zip(scenes, loaded):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "det.jsonl"
        good = record([0.9]).model_dump_json()
        path.write_text(good + "\n" + json.dumps({"image_id": "x", "boxes": []}) + "\n")
        with pytest.raises(ParseError, match=r"det\.jsonl:2"):
            list(load_detections(path))

    def test_skipped_images_are_logged(self, tmp_path, caplog):
        path = tmp_path / "det.jsonl"
        lines = [record([0.9], image_id="kept"), record([0.1], image_id="dropped")]
        path.write_text("".join(r.model_dump_json() + "\n" for r in lines))
        stats = LoadStats()
        with caplog.at_level(logging.WARNING, logger="mtsm"):
            kept = list(load_detections(path, stats=stats))
        assert [d.image_id for d in kept] == ["kept"]
        assert stats.images_read == 2 and stats.images_skipped == 1
        assert "dropped" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            list(load_detections(tmp_path / "absent.jsonl"))


class TestSyntheticScenes:
    def test_deterministic(self):
        a, caps_a = synth_scene(17)
        b, caps_b = synth_scene(17)
        assert caps_a == caps_b
        np.testing.assert_array_equal(a.features, b.features)
        assert a.image_id == b.image_id

    def test_captions_agree_with_boxes(self):
        for seed in range(20):
            det, captions = synth_scene(seed)
            assert 2 <= det.num_objects <= 6
            assert np.all(det.scores >= 0.7)
            assert any(" left of " in c for c in captions)
            assert all(len(c.split()) >= 4 for c in captions)

    def test_relation_wording(self):
        left = SceneObject("red", "square", (0.2, 0.5, 0.1, 0.1))
        right = SceneObject("blue", "circle", (0.8, 0.3, 0.1, 0.1))
        captions = describe_relations([left, right])
        assert captions[0] == "a red square left of a blue circle"
        assert "a blue circle right of a red square" in captions
        assert "a blue circle above a red square" in captions

    def test_corpus_ids_and_caption_cap(self):
        scenes, captions = synth_corpus(3, seed=4, captions_per_scene=1)
        assert [s.image_id for s in scenes] == ["synth-4-00000", "synth-4-00001", "synth-4-00002"]
        assert len(captions) == 3


class TestCaptionFiles:
    def test_round_trip_and_grouping(self, tmp_path):
        lines = [CaptionLine(image_id="a", caption="x y"), CaptionLine(image_id="b", caption="z"),
                 CaptionLine(image_id="a", caption="w")]
        loaded = load_captions(write_captions(tmp_path / "caps.jsonl", lines))
        assert loaded == lines
        assert group_captions(loaded) == {"a": ["x y", "w"], "b": ["z"]}

    def test_bad_line(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text('{"image_id": "a", "caption": "ok"}\n{"caption": "no id"}\n')
        with pytest.raises(ParseError, match=r"caps\.jsonl:2"):
            load_captions(path)


def test_make_examples_wraps_bos_and_eos():
    det, captions = synth_scene(5, image_id="s5")
    vocab = build_vocab([preprocess_caption(c) for c in captions], min_count=1)
    examples = make_examples([det], [CaptionLine(image_id="s5", caption=captions[0]),
                                     CaptionLine(image_id="other", caption="ignored")], vocab)
    assert len(examples) == 1
    ex = examples[0]
    assert ex.inputs[0] == BOS and ex.targets[-1] == EOS
    assert ex.inputs[1:] == ex.targets[:-1]
    assert vocab.to_text(ex.words) == captions[0]


def test_corpus_hash_is_stable():
    from collections import Counter
    assert corpus_hash(Counter({"a": 2, "b": 1})) == corpus_hash(Counter({"b": 1, "a": 2}))
