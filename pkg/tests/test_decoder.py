import numpy as np
import pytest

from core import tensor as tc
from core.decoder import (
    POINTER, VOCAB, DecoderState, Hypothesis, PointerDecoder, beam_decode, causal_mask, greedy_decode,
    multi_hot_target, rank_hypotheses, teacher_forced_loss,
)
from core.encoders import BOS, EOS, UNK, TextEncoder, Vocabulary
from core.errors import ConfigError, ContractError
from core.layers import RngHolder
from core.tensor import Tensor

D, K = 8, 2


def _setup(seed=0, question=("what", "is", "the", "dog")):
    rng = tc.make_rng(seed)
    vocab = Vocabulary(["what", "is", "the", "dog", "red"])
    decoder = PointerDecoder(rng, D, K, len(vocab), RngHolder(seed))
    embed = TextEncoder(rng, len(vocab), D)
    words = list(question)
    state = DecoderState(
        h_rd=Tensor(rng.standard_normal((3, D))), q_star=Tensor(rng.standard_normal((len(words), D))),
        v_st=Tensor(rng.standard_normal((4, D))), question_ids=vocab.encode(words), question_words=words,
    )
    return decoder, embed, state, vocab


def _force_vocab(decoder, slot, bias=50.0):
    """Make the vocabulary head prefer one slot regardless of input and silence the pointer"""
    decoder.g_voc.weight.data[:] = 0.0
    decoder.g_voc.bias.data[:] = -bias
    decoder.g_voc.bias.data[slot] = bias
    decoder.g_ptr_z.weight.data[:] = 0.0
    decoder.g_ptr_z.bias.data[:] = 0.0


class TestDecoderState:
    def test_input_must_start_with_bos(self):
        _, _, state, _ = _setup()
        with pytest.raises(ContractError):
            DecoderState(state.h_rd, state.q_star, state.v_st, state.question_ids, state.question_words, tokens=[5])

    def test_question_ids_must_match_rows(self):
        _, _, state, _ = _setup()
        with pytest.raises(ContractError):
            DecoderState(state.h_rd, state.q_star, state.v_st, state.question_ids[:2], state.question_words[:2])

    def test_extend_leaves_original_untouched(self):
        _, _, state, _ = _setup()
        longer = state.extend(7)
        assert state.tokens == [BOS] and longer.tokens == [BOS, 7]
        assert longer.step == 1


class TestDecoderForward:
    def test_causal_mask(self):
        np.testing.assert_array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])

    def test_later_tokens_do_not_change_earlier_rows(self):
        decoder, embed, state, _ = _setup()
        first = decoder.decoder_forward(embed([BOS, 4, 5, 6]), state).data
        second = decoder.decoder_forward(embed([BOS, 4, 5, 8]), state).data
        np.testing.assert_array_equal(first[:3], second[:3])
        assert not np.array_equal(first[3], second[3])

    def test_single_position_attends_only_to_itself(self):
        decoder, embed, state, _ = _setup()
        trace = {}
        decoder.decoder_forward(embed([BOS]), state, trace)
        for weights in trace["block0"]["weights"]["self"]:
            np.testing.assert_array_equal(weights, [[1.0]])

    def test_video_enters_only_at_the_last_stage(self):
        decoder, embed, state, _ = _setup()
        before, after = {}, {}
        decoder.decoder_forward(embed([BOS, 4]), state, before)
        shifted = DecoderState(state.h_rd, state.q_star, Tensor(state.v_st.data + 1.0),
                               state.question_ids, state.question_words)
        decoder.decoder_forward(embed([BOS, 4]), shifted, after)
        for stage in ("self", "history", "question"):
            np.testing.assert_array_equal(before["block0"]["outputs"][stage].data,
                                          after["block0"]["outputs"][stage].data)
        assert not np.array_equal(before["block0"]["outputs"]["video"].data,
                                  after["block0"]["outputs"]["video"].data)

    def test_padded_history_rows_get_no_weight(self):
        decoder, embed, state, _ = _setup()
        padded = DecoderState(state.h_rd, state.q_star, state.v_st, state.question_ids, state.question_words,
                              h_valid=np.array([True, True, False]))
        trace = {}
        decoder.decoder_forward(embed([BOS, 4]), padded, trace)
        for weights in trace["block0"]["weights"]["history"]:
            np.testing.assert_array_equal(weights[:, 2], 0.0)


class TestStepScores:
    def test_width_is_vocabulary_plus_question(self):
        decoder, embed, state, vocab = _setup()
        z = decoder.decoder_forward(embed([BOS, 4]), state)
        scores = decoder.step_scores(z, state.q_star)
        assert scores.p.shape == (2, len(vocab) + 4)
        np.testing.assert_array_equal(scores.p.data[:, :len(vocab)], scores.p_voc.data)

    def test_orthogonal_pointer_projection_gives_zero_logits(self):
        decoder, embed, state, _ = _setup()
        decoder.g_ptr_q.weight.data[:] = 0.0
        z = decoder.decoder_forward(embed([BOS]), state)
        np.testing.assert_array_equal(decoder.step_scores(z, state.q_star).p_ptr.data, 0.0)


class TestTargets:
    def test_every_matching_question_position_is_marked(self):
        y = multi_hot_target(5, "dog", ["the", "dog", "and", "dog"], vocab_size=7)
        assert y.sum() == 3
        assert y[5] == 1 and y[8] == 1 and y[10] == 1

    def test_comparison_uses_raw_words(self):
        y = multi_hot_target(UNK, "zebra", ["a", "zebra"], vocab_size=7)
        np.testing.assert_array_equal(np.flatnonzero(y), [UNK, 8])

    def test_teacher_forced_loss(self):
        decoder, embed, state, vocab = _setup()
        answer = ["the", "dog"]
        loss, logits, Y = teacher_forced_loss(decoder, embed, state, vocab.encode(answer), answer)
        assert np.isfinite(loss.item()) and loss.item() > 0.0
        assert logits.shape == Y.shape == (3, len(vocab) + 4)
        assert Y[-1, EOS] == 1.0 and Y[-1].sum() == 1.0
        assert Y[1, vocab.index("dog")] == 1.0 and Y[1, len(vocab) + 3] == 1.0

    def test_empty_answer_rejected(self):
        decoder, embed, state, _ = _setup()
        with pytest.raises(ContractError):
            teacher_forced_loss(decoder, embed, state, [], [])


class TestGreedyDecode:
    def test_eos_first_gives_empty_answer(self):
        decoder, embed, state, vocab = _setup()
        _force_vocab(decoder, EOS)
        hyp = greedy_decode(decoder, embed, state, vocab, max_len=5)
        assert hyp.tokens == [] and hyp.finished
        assert hyp.length == 1

    def test_stops_at_max_len(self):
        decoder, embed, state, vocab = _setup()
        _force_vocab(decoder, vocab.index("red"))
        hyp = greedy_decode(decoder, embed, state, vocab, max_len=3)
        assert hyp.words == ["red", "red", "red"]
        assert not hyp.finished

    def test_pointer_copies_the_question_word(self):
        decoder, embed, state, vocab = _setup(question=("is", "the", "zebra", "red"))
        state = DecoderState(state.h_rd, Tensor(np.eye(4, D)), state.v_st, state.question_ids, state.question_words)
        _force_vocab(decoder, EOS)
        decoder.g_voc.bias.data[:] = -50.0
        decoder.g_ptr_q.weight.data[:] = np.eye(D)
        decoder.g_ptr_q.bias.data[:] = 0.0
        decoder.g_ptr_z.bias.data[:] = 10.0 * np.eye(D)[2]
        hyp = greedy_decode(decoder, embed, state, vocab, max_len=2)
        assert hyp.words == ["zebra", "zebra"]
        assert hyp.tokens == [UNK, UNK]
        assert hyp.segments == [POINTER, POINTER]


class TestBeamDecode:
    @pytest.mark.parametrize("seed", range(50))
    def test_beam_of_one_matches_greedy(self, seed):
        decoder, embed, state, vocab = _setup(seed)
        assert beam_decode(decoder, embed, state, vocab, beam=1, max_len=6) == \
            greedy_decode(decoder, embed, state, vocab, max_len=6)

    def test_segments_are_labelled(self):
        decoder, embed, state, vocab = _setup()
        _force_vocab(decoder, vocab.index("red"))
        hyp = beam_decode(decoder, embed, state, vocab, beam=3, max_len=2)
        assert hyp.segments == [VOCAB, VOCAB]

    def test_beam_must_be_positive(self):
        decoder, embed, state, vocab = _setup()
        with pytest.raises(ConfigError):
            beam_decode(decoder, embed, state, vocab, beam=0)


class TestRanking:
    def test_length_penalty_changes_the_winner(self):
        short = Hypothesis(tokens=[4, 5], score=-2.0)
        long = Hypothesis(tokens=[4, 5, 6], score=-2.4, finished=True)
        assert rank_hypotheses([short, long], length_penalty=1.0)[0] is long
        assert rank_hypotheses([short, long], length_penalty=0.0)[0] is short

    def test_ties_keep_the_earlier_hypothesis(self):
        a = Hypothesis(tokens=[4], score=-1.0)
        b = Hypothesis(tokens=[5], score=-1.0)
        assert rank_hypotheses([a, b])[0] is a


class TestModelDecoding:
    def test_model_beam_of_one_matches_greedy(self, model, eval_samples):
        for sample in eval_samples[:3]:
            greedy, _ = model.decode(sample)
            beam, _ = model.decode(sample, beam=1)
            assert beam == greedy

    def test_decoding_restores_training_mode(self, model, eval_samples):
        model.train()
        model.decode(eval_samples[0])
        assert model.training and model.decoder.training

    def test_loss_gradient_reaches_every_component(self, model, samples):
        sample = next(s for s in samples if s.round >= 2)
        model.zero_grad()
        tc.backward(model.loss(sample).loss)
        for component in (model.text_encoder, model.video_encoder, model.coref, model.reasoner, model.decoder):
            assert any(p.grad is not None and np.any(p.grad != 0.0) for p in component.parameters())
