"""
Pointer-augmented Transformer Decoder
Four attention stages per block (answer self-attention, then history, question
and video cross-attention), a vocabulary head and a bilinear pointer head over
the question tokens. Trained with multi-label BCE; decoded greedily or by beam search.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import tensor as tc
from core.encoders import BOS, EOS, TokenSequence, Vocabulary
from core.errors import ConfigError, ContractError
from core.layers import Dropout, LayerNorm, Linear, Module, RngHolder
from core.tensor import Tensor

logger = logging.getLogger(__name__)

STAGES = ("self", "history", "question", "video")
VOCAB, POINTER = "vocab", "pointer"

Embedder = Callable[[TokenSequence], Tensor]


def causal_mask(length: int) -> np.ndarray:
    """Row i may attend to columns 0..i"""
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention(Module):
    """Scaled dot-product attention, K heads of width d/K, output projection"""

    def __init__(self, rng: np.random.Generator, d: int, K: int, dropout: Optional[Dropout] = None):
        if d % K:
            raise ConfigError(f"d={d} is not divisible by K={K}")
        self.K = K
        self.width = d // K
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.attn_dropout = dropout

    def __call__(self, query: Tensor, keys: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, List[np.ndarray]]:
        """
        Args:
            query: n_q x d
            keys: n_k x d (also used as values)
            mask: Boolean, n_q x n_k or n_k (key validity); False entries get zero weight

        Returns:
            (n_q x d output, per-head weight matrices)
        """
        Q, Kx, V = self.wq(query), self.wk(keys), self.wv(keys)
        scale = 1.0 / np.sqrt(self.width)
        heads, weights = [], []
        for k in range(self.K):
            lo, hi = k * self.width, (k + 1) * self.width
            q_k = tc.slice_along(Q, 1, lo, hi)
            k_k = tc.slice_along(Kx, 1, lo, hi)
            v_k = tc.slice_along(V, 1, lo, hi)
            alpha = tc.softmax(tc.matmul(q_k, tc.transpose(k_k)) * scale, axis=1, mask=mask)
            weights.append(alpha.data)
            if self.attn_dropout is not None:
                alpha = self.attn_dropout(alpha)
            heads.append(tc.matmul(alpha, v_k))
        return self.wo(tc.concat(heads, axis=1)), weights


@dataclass
class DecoderState:
    """Encoder-side tensors cached for decoding, plus the partial answer"""
    h_rd: Tensor
    q_star: Tensor
    v_st: Tensor
    question_ids: TokenSequence
    question_words: List[str]
    h_valid: Optional[np.ndarray] = None
    tokens: TokenSequence = field(default_factory=lambda: [BOS])

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != BOS:
            raise ContractError("decoder input must start with <bos>")
        if len(self.question_ids) != self.q_star.shape[0]:
            raise ContractError(f"{len(self.question_ids)} question ids for {self.q_star.shape[0]} question rows")

    @property
    def step(self) -> int:
        return len(self.tokens) - 1

    def extend(self, token: int) -> "DecoderState":
        return replace(self, tokens=self.tokens + [token])


@dataclass
class StepScores:
    """p = [p_voc || p_ptr] for one decoding step"""
    p_voc: Tensor
    p_ptr: Tensor
    p: Tensor

    @property
    def vocab_size(self) -> int:
        return self.p_voc.shape[-1]


class DecoderBlock(Module):
    """Post-norm: x = LN(x + dropout(sublayer(x))) for each of the four attentions and the FFN"""

    def __init__(self, rng: np.random.Generator, d: int, K: int, rng_holder: RngHolder,
                 dropout: float = 0.0, ffn: bool = True):
        self.attn = [MultiHeadAttention(rng, d, K, Dropout(dropout, rng_holder)) for _ in STAGES]
        self.norms = [LayerNorm(d) for _ in STAGES]
        self.ffn_in = Linear(rng, d, 4 * d) if ffn else None
        self.ffn_out = Linear(rng, 4 * d, d) if ffn else None
        self.ffn_norm = LayerNorm(d) if ffn else None
        self.drop = Dropout(dropout, rng_holder)

    def __call__(self, a: Tensor, state: DecoderState) -> Tuple[Tensor, Dict[str, Tensor], Dict[str, List[np.ndarray]]]:
        sources = {
            "self": (a, causal_mask(a.shape[0])),
            "history": (state.h_rd, state.h_valid),
            "question": (state.q_star, None),
            "video": (state.v_st, None),
        }
        x = a
        stage_outputs, weights = {}, {}
        for stage, attn, norm in zip(STAGES, self.attn, self.norms):
            keys, mask = sources[stage]
            if stage == "self":
                keys = x
            out, weights[stage] = attn(x, keys, mask)
            x = norm(x + self.drop(out))
            stage_outputs[stage] = x
        if self.ffn_in is not None:
            hidden = self.ffn_out(tc.relu(self.ffn_in(x)))
            x = self.ffn_norm(x + self.drop(hidden))
        return x, stage_outputs, weights


class PointerDecoder(Module):
    def __init__(self, rng: np.random.Generator, d: int, K: int, vocab_size: int, rng_holder: RngHolder,
                 dropout: float = 0.0, ffn: bool = True, blocks: int = 1):
        self.vocab_size = vocab_size
        self.blocks = [DecoderBlock(rng, d, K, rng_holder, dropout, ffn) for _ in range(blocks)]
        self.g_voc = Linear(rng, d, vocab_size)
        self.g_ptr_q = Linear(rng, d, d)
        self.g_ptr_z = Linear(rng, d, d)

    def decoder_forward(self, a_in: Tensor, state: DecoderState,
                        trace: Optional[dict] = None) -> Tensor:
        """
        z^v for every decoder position

        Args:
            a_in: Embedded decoder input, j x d
            state: Cached encoder-side tensors
            trace: When given, filled with per-block stage outputs and attention weights
        """
        x = a_in
        for i, block in enumerate(self.blocks):
            x, stage_outputs, weights = block(x, state)
            if trace is not None:
                trace[f"block{i}"] = {"outputs": stage_outputs, "weights": weights}
        return x

    def step_scores(self, z: Tensor, q_star: Tensor) -> StepScores:
        """p_voc = g_voc(z); p_ptr = g_ptr_z(z) . g_ptr_q(q*)^T; rows of z are steps"""
        p_voc = self.g_voc(z)
        p_ptr = tc.matmul(self.g_ptr_z(z), tc.transpose(self.g_ptr_q(q_star)))
        return StepScores(p_voc=p_voc, p_ptr=p_ptr, p=tc.concat([p_voc, p_ptr], axis=-1))


def multi_hot_target(target_id: int, target_word: str, question_words: Sequence[str], vocab_size: int) -> np.ndarray:
    """Vocabulary slot of the target plus every question position holding the same word"""
    y = np.zeros(vocab_size + len(question_words))
    y[target_id] = 1.0
    for i, word in enumerate(question_words):
        if word == target_word:
            y[vocab_size + i] = 1.0
    return y


def step_loss(p: Tensor, y: np.ndarray) -> Tensor:
    return tc.bce_with_logits(p, y)


def slot_token(slot: int, state: DecoderState, vocab: Vocabulary) -> Tuple[int, str, str]:
    """Map a slot of p to (token id, word, segment); pointer hits copy the question's word"""
    V = len(vocab)
    if slot < V:
        return slot, vocab.itos[slot], VOCAB
    i = slot - V
    return state.question_ids[i], state.question_words[i], POINTER


def teacher_forced_loss(decoder: PointerDecoder, embed: Embedder, state: DecoderState,
                        answer_ids: TokenSequence, answer_words: Sequence[str]) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Decoder input <bos> + answer, targets answer + <eos>

    Returns:
        (mean BCE loss, logits j x (|V| + N_q), multi-hot targets of the same shape)
    """
    if len(answer_ids) == 0:
        raise ContractError("teacher forcing needs a non-empty target answer")
    if len(answer_ids) != len(answer_words):
        raise ContractError("answer ids and words differ in length")
    a_in = embed([BOS] + list(answer_ids))
    z = decoder.decoder_forward(a_in, state)
    scores = decoder.step_scores(z, state.q_star)
    targets = list(zip(answer_ids, answer_words)) + [(EOS, "<eos>")]
    Y = np.stack([multi_hot_target(tid, w, state.question_words, decoder.vocab_size) for tid, w in targets])
    return step_loss(scores.p, Y), scores.p.data, Y


@dataclass
class Hypothesis:
    tokens: TokenSequence = field(default_factory=list)
    words: List[str] = field(default_factory=list)
    segments: List[str] = field(default_factory=list)
    score: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated tokens, <eos> included"""
        return len(self.tokens) + (1 if self.finished else 0)

    def normalized(self, length_penalty: float) -> float:
        return self.score / max(self.length, 1) ** length_penalty


def rank_hypotheses(hyps: Sequence[Hypothesis], length_penalty: float = 1.0) -> List[Hypothesis]:
    """Best first by score / length^penalty; earlier hypotheses win ties"""
    order = sorted(range(len(hyps)), key=lambda i: (-hyps[i].normalized(length_penalty), i))
    return [hyps[i] for i in order]


def _last_step(decoder: PointerDecoder, embed: Embedder, state: DecoderState) -> np.ndarray:
    with tc.no_grad():
        z = decoder.decoder_forward(embed(state.tokens), state)
        last = tc.slice_along(z, 0, z.shape[0] - 1, z.shape[0])
        return decoder.step_scores(last, state.q_star).p.data[0]


def greedy_decode(decoder: PointerDecoder, embed: Embedder, state: DecoderState,
                  vocab: Vocabulary, max_len: int = 30) -> Hypothesis:
    """Argmax over raw logits each step; stops on <eos> or after max_len steps"""
    hyp = Hypothesis()
    for _ in range(max_len):
        p = _last_step(decoder, embed, state)
        slot = int(np.argmax(p))
        token, word, segment = slot_token(slot, state, vocab)
        hyp.score += float(tc.log_sigmoid_values(p)[slot])
        if segment == VOCAB and token == EOS:
            hyp.finished = True
            break
        hyp.tokens.append(token)
        hyp.words.append(word)
        hyp.segments.append(segment)
        state = state.extend(token)
    return hyp


def _extensions(p: np.ndarray, state: DecoderState, vocab: Vocabulary) -> List[Tuple[float, int, int, str, str]]:
    """Per distinct token keep its best slot (lowest slot on ties); returns (log-sigmoid, slot, token, word, segment)"""
    log_probs = tc.log_sigmoid_values(p)
    best: Dict[Tuple[int, str], Tuple[float, int, int, str, str]] = {}
    for slot in range(p.shape[0]):
        token, word, segment = slot_token(slot, state, vocab)
        key = (token, word)
        if key not in best or log_probs[slot] > best[key][0]:
            best[key] = (float(log_probs[slot]), slot, token, word, segment)
    return list(best.values())


def beam_decode(decoder: PointerDecoder, embed: Embedder, state: DecoderState, vocab: Vocabulary,
                beam: int = 5, length_penalty: float = 1.0, max_len: int = 30) -> Hypothesis:
    """
    Length-normalized beam search over log-sigmoid slot scores

    Pruning uses cumulative scores; the final choice uses score / length^penalty.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    live: List[Tuple[Hypothesis, DecoderState]] = [(Hypothesis(), state)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for rank, (hyp, hyp_state) in enumerate(live):
            p = _last_step(decoder, embed, hyp_state)
            for log_prob, slot, token, word, segment in _extensions(p, hyp_state, vocab):
                candidates.append((hyp.score + log_prob, rank, slot, hyp, hyp_state, token, word, segment))
        # equal scores: earlier hypothesis, then lower slot
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, _, _, hyp, hyp_state, token, word, segment in candidates[:beam]:
            if segment == VOCAB and token == EOS:
                finished.append(Hypothesis(list(hyp.tokens), list(hyp.words), list(hyp.segments), score, True))
            else:
                grown = Hypothesis(hyp.tokens + [token], hyp.words + [word], hyp.segments + [segment], score)
                live.append((grown, hyp_state.extend(token)))
        if not live or len(finished) >= beam:
            break
    pool = finished + [hyp for hyp, _ in live]
    ranked = rank_hypotheses(pool, length_penalty)
    logger.debug("beam search kept %d hypotheses, best normalized score %.4f",
                 len(pool), ranked[0].normalized(length_penalty))
    return ranked[0]
