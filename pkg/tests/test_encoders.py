import math

import numpy as np
import pytest

from core.encoders import (
    BOS, EOS, PAD, UNK, TextEncoder, VideoEncoder, VideoObjects, Vocabulary,
    build_history_units, positional_encoding, tokenize,
)
from core.errors import BoundsError, ContractError, DatasetError


def _video(rng, T=2, O=3, d_v=5):
    boxes = np.tile(np.array([0.1, 0.1, 0.2, 0.2]), (T, O, 1))
    return VideoObjects(appearance=rng.standard_normal((T, O, d_v)), boxes=boxes,
                        labels=[["dog", "cat", "ball"][:O] for _ in range(T)])


class TestTokenize:
    def test_lowercases_and_splits_on_punctuation(self):
        assert tokenize("What's the RED dog?") == ["what", "s", "the", "red", "dog"]

    def test_empty_text(self):
        assert tokenize("  ,. ") == []


class TestVocabulary:
    def test_reserved_indices(self):
        vocab = Vocabulary(["dog"])
        assert [vocab.index(t) for t in ("<bos>", "<eos>", "<unk>", "<pad>")] == [BOS, EOS, UNK, PAD]
        assert vocab.index("dog") == 4

    def test_unknown_words_map_to_unk(self):
        assert Vocabulary(["dog"]).encode(["dog", "zebra"]) == [4, UNK]

    def test_build_orders_by_frequency_then_alphabet(self):
        vocab = Vocabulary.build([["b", "a", "c"], ["c", "b"], ["c"]])
        assert vocab.itos[4:] == ["c", "b", "a"]

    def test_save_and_load(self, tmp_path):
        vocab = Vocabulary.build([["the", "red", "dog"], ["the", "cat"]])
        vocab.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt").itos == vocab.itos

    def test_load_rejects_duplicates(self, tmp_path):
        (tmp_path / "vocab.txt").write_text("dog\ncat\ndog\n", encoding="utf-8")
        with pytest.raises(DatasetError):
            Vocabulary.load(tmp_path / "vocab.txt")

    def test_load_rejects_reserved_entry(self, tmp_path):
        (tmp_path / "vocab.txt").write_text("dog\n<eos>\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="line 2"):
            Vocabulary.load(tmp_path / "vocab.txt")


class TestPositionalEncoding:
    def test_first_position(self):
        table = positional_encoding(3, 6)
        np.testing.assert_array_equal(table[0, 0::2], 0.0)
        np.testing.assert_array_equal(table[0, 1::2], 1.0)

    def test_pairs_share_frequency(self):
        table = positional_encoding(5, 8)
        np.testing.assert_allclose(table[:, 2] ** 2 + table[:, 3] ** 2, 1.0, atol=1e-12)


class TestTextEncoder:
    def test_output_rows_are_normalized(self, rng):
        encoder = TextEncoder(rng, vocab_size=10, d=8)
        out = encoder.encode_text([0, 5, 7]).data
        assert out.shape == (3, 8)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)

    def test_empty_sequence_rejected(self, rng):
        with pytest.raises(ContractError):
            TextEncoder(rng, 10, 8).encode_text([])

    def test_out_of_vocabulary_index_rejected(self, rng):
        with pytest.raises(BoundsError):
            TextEncoder(rng, 10, 8).encode_text([3, 10])

    def test_long_sequences_extend_the_position_table(self, rng):
        encoder = TextEncoder(rng, 10, 8, max_len=4)
        assert encoder.encode_text([1] * 9).shape == (9, 8)


class TestVideoEncoder:
    def test_rows_are_frame_major(self, rng):
        video = _video(rng)
        encoder = VideoEncoder(rng, d_v=5, d=8)
        before = encoder(video).data
        video.appearance[1, 2] += 1.0
        after = encoder(video).data
        changed = np.flatnonzero(np.any(before != after, axis=1))
        assert changed.tolist() == [video.node_index(1, 2)] == [5]

    def test_validate_rejects_box_outside_frame(self, rng):
        video = _video(rng)
        video.boxes[0, 0] = [0.9, 0.1, 0.2, 0.2]
        with pytest.raises(ContractError):
            video.validate()

    def test_validate_rejects_ragged_labels(self, rng):
        video = _video(rng)
        video.labels[1] = ["dog"]
        with pytest.raises(ContractError):
            video.validate()


class TestHistoryUnits:
    def test_caption_then_question_answer_pairs(self):
        units = build_history_units(["a", "dog"], [(["q1"], ["a1"]), (["q2"], ["a2", "x"])])
        assert units == [["a", "dog"], ["q1", "a1"], ["q2", "a2", "x"]]

    def test_first_round_has_only_the_caption(self):
        assert build_history_units(["a", "dog"], []) == [["a", "dog"]]


class TestPositionalReference:
    def test_matches_scalar_formula(self, rng):
        d = 16
        table = positional_encoding(50, d)
        for _ in range(10):
            pos, i = int(rng.integers(50)), int(rng.integers(d // 2))
            assert table[pos, 2 * i] == pytest.approx(math.sin(pos / 10000 ** (2 * i / d)), abs=1e-15)
            assert table[pos, 2 * i + 1] == pytest.approx(math.cos(pos / 10000 ** (2 * i / d)), abs=1e-15)

    def test_word_order_changes_the_encoding(self, rng):
        encoder = TextEncoder(rng, 10, 8)
        assert not np.allclose(encoder([4, 5]).data, encoder([5, 4]).data)
