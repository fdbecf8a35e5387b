"""
SCGA model - input encoders, co-reference resolver, video reasoner and pointer decoder
wired into one Module with teacher-forced loss and greedy / beam inference
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import tensor as tc
from core.coref import CoreferenceResolver, HistoryScore
from core.decoder import DecoderState, Hypothesis, PointerDecoder, beam_decode, greedy_decode, teacher_forced_loss
from core.dialogue_world import DialogueSample
from core.encoders import RESERVED_TOKENS, PAD, TextEncoder, Vocabulary, VideoEncoder, build_history_units
from core.layers import Module, RngHolder
from core.settings import SCGAConfig
from core.stgraph import SpatioTemporalGraph, VideoReasoner
from core.tensor import Tensor

logger = logging.getLogger(__name__)

CAPTION_PLACEHOLDER = [RESERVED_TOKENS[PAD]]


@dataclass
class EncodedContext:
    """Encoder-side results for one sample; attention maps are kept for export"""
    question_ids: List[int]
    question_words: List[str]
    q: Tensor
    q_star: Tensor
    h_rd: Tensor
    h_valid: np.ndarray
    v: Tensor
    v_star: Tensor
    v_st: Tensor
    selection: HistoryScore
    graph: Optional[SpatioTemporalGraph] = None
    attention: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def decoder_state(self) -> DecoderState:
        return DecoderState(h_rd=self.h_rd, q_star=self.q_star, v_st=self.v_st, question_ids=self.question_ids,
                            question_words=self.question_words, h_valid=self.h_valid)


@dataclass
class LossResult:
    loss: Tensor
    logits: np.ndarray
    targets: np.ndarray
    context: EncodedContext

    @property
    def token_hits(self) -> int:
        """Steps whose argmax slot is a target slot"""
        picks = self.logits.argmax(axis=1)
        return int(self.targets[np.arange(len(picks)), picks].sum())

    @property
    def steps(self) -> int:
        return self.logits.shape[0]


class SCGAModel(Module):
    def __init__(self, config: SCGAConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        init_rng = tc.make_rng(config.seed)
        # dropout masks and Gumbel noise share one stream, separate from initialization
        self.rng = RngHolder(config.seed + 1)
        d, K = config.d, config.K

        self.text_encoder = TextEncoder(init_rng, len(vocab), d)
        self.video_encoder = VideoEncoder(init_rng, config.d_v, d)
        self.coref = CoreferenceResolver(
            init_rng, d, K, self.rng, dropout=config.dropout,
            textual=config.use_textual_coref, visual=config.use_visual_coref,
            temperature=config.gumbel_temperature,
        )
        self.reasoner = (
            VideoReasoner(init_rng, d, K, self.rng, dropout=config.dropout, residual=config.st_residual)
            if config.use_st_reasoner else None
        )
        self.head_assignment = config.head_assignment() if config.use_st_reasoner else None
        self.decoder = PointerDecoder(init_rng, d, K, len(vocab), self.rng, dropout=config.dropout,
                                      ffn=config.ffn, blocks=config.decoder_blocks)
        self.assign_names()

    def _history_ids(self, sample: DialogueSample) -> List[List[int]]:
        caption = sample.caption if self.config.use_caption and sample.caption else CAPTION_PLACEHOLDER
        units = build_history_units(caption, sample.turns)
        return [self.vocab.encode(unit or CAPTION_PLACEHOLDER) for unit in units]

    def build_graph(self, sample: DialogueSample) -> SpatioTemporalGraph:
        return SpatioTemporalGraph.from_video(sample.video, self.config.tau_s, self.config.tau_t,
                                              self.config.distances, self.head_assignment, self.config.K)

    def encode_context(self, sample: DialogueSample, mode: Optional[str] = None) -> EncodedContext:
        """
        Encode question, history and video, then resolve co-references and reason over the object graph

        Args:
            sample: One dialogue round
            mode: "train" (Gumbel noise) or "eval" (argmax); defaults to the module's training flag
        """
        mode = mode or ("train" if self.training else "eval")
        question_ids = self.vocab.encode(sample.question)
        q = self.text_encoder(question_ids)
        histories = [self.text_encoder(ids) for ids in self._history_ids(sample)]

        selection, h_rd, h_valid = self.coref.select(q, histories, mode)
        q_star, text_alphas = self.coref.resolve_textual(q, h_rd, h_valid)
        v = self.video_encoder(sample.video)
        v_star, video_alphas = self.coref.resolve_visual(v, q_star)

        graph, st_alphas, v_st = None, [], v_star
        if self.reasoner is not None:
            graph = self.build_graph(sample)
            v_st, st_alphas = self.reasoner.gn_gat(v_star, graph)
        return EncodedContext(
            question_ids=question_ids, question_words=list(sample.question), q=q, q_star=q_star,
            h_rd=h_rd, h_valid=h_valid, v=v, v_star=v_star, v_st=v_st, selection=selection, graph=graph,
            attention={"textual": text_alphas, "visual": video_alphas, "spatiotemporal": st_alphas},
        )

    def loss(self, sample: DialogueSample) -> LossResult:
        context = self.encode_context(sample)
        answer_ids = self.vocab.encode(sample.answer)
        loss, logits, targets = teacher_forced_loss(self.decoder, self.text_encoder, context.decoder_state(),
                                                    answer_ids, sample.answer)
        return LossResult(loss=loss, logits=logits, targets=targets, context=context)

    def decode(self, sample: DialogueSample, beam: Optional[int] = None,
               length_penalty: Optional[float] = None) -> Tuple[Hypothesis, EncodedContext]:
        """Greedy when beam is None, beam search otherwise; always in eval mode without recording"""
        was_training = self.training
        self.eval()
        try:
            with tc.no_grad():
                context = self.encode_context(sample, "eval")
                state = context.decoder_state()
                max_len = self.config.max_answer_len
                if beam is None:
                    hyp = greedy_decode(self.decoder, self.text_encoder, state, self.vocab, max_len)
                else:
                    penalty = self.config.length_penalty if length_penalty is None else length_penalty
                    hyp = beam_decode(self.decoder, self.text_encoder, state, self.vocab, beam, penalty, max_len)
        finally:
            self.train(was_training)
        return hyp, context
