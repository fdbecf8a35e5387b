"""
Structured Co-reference Resolver
Discrete selection of one key dialogue history (Gumbel-Softmax) followed by
bipartite graph attention from question to history and from video to question.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core import tensor as tc
from core.errors import ConfigError, ContractError, NumericError, ShapeError
from core.layers import Dropout, Linear, Module, RngHolder
from core.tensor import Parameter, Tensor

MODES = ("train", "eval")

# Longest dialogue; f_s sees r - i divided by it so the distance input stays in (0, 1]
DISTANCE_SCALE = 10.0


@dataclass
class HistoryScore:
    """Per-history matching features for one round"""
    e: Tensor                 # r x d
    delta: np.ndarray         # r, delta[i] = r - i
    s: Tensor                 # r
    g: Optional[Tensor] = None
    selected: Optional[int] = None


@dataclass
class BipartiteGraph:
    """Two node partitions, linked across partitions, with self-loops everywhere"""
    features: Tensor
    n_a: int
    n_b: int
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features.shape[0] != self.n_a + self.n_b:
            raise ShapeError(f"graph has {self.features.shape[0]} rows, partitions sum to {self.n_a + self.n_b}")

    @property
    def num_nodes(self) -> int:
        return self.n_a + self.n_b

    def neighborhood_mask(self) -> np.ndarray:
        """N x N boolean; row i is the neighborhood of node i. Invalid (padded) nodes only see themselves."""
        side = np.r_[np.zeros(self.n_a, dtype=bool), np.ones(self.n_b, dtype=bool)]
        valid = np.ones(self.num_nodes, dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        mask = (side[:, None] != side[None, :]) & valid[:, None] & valid[None, :]
        np.fill_diagonal(mask, True)
        return mask


class GraphAttention(Module):
    """
    Multi-head graph attention; each head may use its own neighborhood mask

    Per head k: alpha_ij = softmax_{j in N_i} LeakyReLU(a_k^T [W^k V_i || W^k V_j]),
    output_i = LeakyReLU(sum_j alpha_ij W^k V_j). Heads are concatenated (width d/K each).
    """

    def __init__(self, rng: np.random.Generator, d: int, K: int, dropout: Optional[Dropout] = None):
        if d % K:
            raise ConfigError(f"d={d} is not divisible by K={K}")
        self.d = d
        self.K = K
        width = d // K
        self.W = [Parameter(tc.uniform_init(rng, (d, width), d)) for _ in range(K)]
        self.a_src = [Parameter(tc.uniform_init(rng, (width, 1), 2 * width)) for _ in range(K)]
        self.a_dst = [Parameter(tc.uniform_init(rng, (width, 1), 2 * width)) for _ in range(K)]
        self.attn_dropout = dropout

    def __call__(self, V: Tensor, head_masks: Sequence[np.ndarray]) -> Tuple[Tensor, List[np.ndarray]]:
        if len(head_masks) != self.K:
            raise ConfigError(f"{len(head_masks)} neighborhood masks for {self.K} heads")
        outputs, alphas = [], []
        for k, mask in enumerate(head_masks):
            Z = tc.matmul(V, self.W[k])
            src = tc.matmul(Z, self.a_src[k])
            dst = tc.matmul(Z, self.a_dst[k])
            scores = tc.leaky_relu(src + tc.transpose(dst))
            alpha = tc.softmax(scores, axis=1, mask=mask)
            alphas.append(alpha.data)
            if self.attn_dropout is not None:
                alpha = self.attn_dropout(alpha)
            outputs.append(tc.leaky_relu(tc.matmul(alpha, Z)))
        return tc.concat(outputs, axis=1), alphas


def gat_layer(graph: BipartiteGraph, layer: GraphAttention) -> Tuple[Tensor, List[np.ndarray]]:
    """One multi-head pass where every head uses the graph's bipartite neighborhood"""
    mask = graph.neighborhood_mask()
    return layer(graph.features, [mask] * layer.K)


class HistorySelector(Module):
    """Matching score between the question and each dialogue history unit"""

    def __init__(self, rng: np.random.Generator, d: int):
        self.d = d
        self.f_q = Linear(rng, d, d)
        self.f_h = Linear(rng, d, d)
        self.f_e = Linear(rng, 2 * d, d)
        self.f_s = Linear(rng, d + 1, 1)

    def score_histories(self, q: Tensor, histories: Sequence[Tensor]) -> HistoryScore:
        """
        e_i = f_e([f_q(mean(q)) || f_h(mean(h_i))]), s_i = f_s([e_i || (r - i) / DISTANCE_SCALE])

        Args:
            q: Encoded question, N_q x d
            histories: Encoded history units h_0..h_{r-1}

        Returns:
            HistoryScore with s of length r
        """
        r = len(histories)
        if r < 1:
            raise ContractError("score_histories needs at least one history unit")
        q_mean = tc.mean(q, axis=0, keepdims=True)
        h_means = tc.concat([tc.mean(h, axis=0, keepdims=True) for h in histories], axis=0)
        fq_rows = tc.matmul(Tensor(np.ones((r, 1))), self.f_q(q_mean))
        e = tc.leaky_relu(self.f_e(tc.concat([fq_rows, self.f_h(h_means)], axis=1)))
        delta = (r - np.arange(r)).astype(np.float64)
        s = tc.reshape(self.f_s(tc.concat([e, Tensor(delta[:, None] / DISTANCE_SCALE)], axis=1)), (r,))
        return HistoryScore(e=e, delta=delta, s=s)


def gumbel_select(s: Tensor, histories: Sequence[Tensor], temperature: float, mode: str,
                  rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor, np.ndarray]:
    """
    Discrete attention over histories

    train: Gumbel noise, hard one-hot forward, soft straight-through gradient.
    eval: noiseless argmax (lowest index on ties).

    Returns:
        (g one-hot over r, h_rd padded to the longest history, validity of h_rd rows)
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if not np.all(np.isfinite(s.data)):
        raise NumericError(f"non-finite history scores: {s.data}")
    r = s.shape[0]
    if len(histories) != r:
        raise ShapeError(f"{r} scores for {len(histories)} histories")
    logits = s
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode selection needs a random generator")
        u = rng.random(r)
        logits = s + (-np.log(-np.log(u + 1e-20) + 1e-20))
    logits = logits / temperature
    soft = tc.softmax(logits, axis=0)
    index = int(np.argmax(logits.data))
    g = tc.add(tc.sub(soft, soft.detach()), tc.one_hot(index, r))

    d = histories[0].shape[1]
    longest = max(h.shape[0] for h in histories)
    h_rd = None
    for i, h in enumerate(histories):
        padded = h if h.shape[0] == longest else tc.concat([h, Tensor(np.zeros((longest - h.shape[0], d)))], axis=0)
        term = padded * tc.reshape(tc.slice_along(g, 0, i, i + 1), (1, 1))
        h_rd = term if h_rd is None else h_rd + term
    valid = np.arange(longest) < histories[index].shape[0]
    return g, h_rd, valid


class CoreferenceResolver(Module):
    """Textual (question <- history) and visual (video <- question) co-reference resolution"""

    def __init__(self, rng: np.random.Generator, d: int, K: int, rng_holder: RngHolder,
                 dropout: float = 0.0, textual: bool = True, visual: bool = True,
                 temperature: float = 1.0):
        self.selector = HistorySelector(rng, d)
        self.temperature = temperature
        self.rng = rng_holder
        self.text_gat = GraphAttention(rng, d, K, Dropout(dropout, rng_holder)) if textual else None
        self.video_gat = GraphAttention(rng, d, K, Dropout(dropout, rng_holder)) if visual else None
        self.out_dropout = Dropout(dropout, rng_holder)

    def select(self, q: Tensor, histories: Sequence[Tensor], mode: str) -> Tuple[HistoryScore, Tensor, np.ndarray]:
        score = self.selector.score_histories(q, histories)
        g, h_rd, valid = gumbel_select(score.s, histories, self.temperature, mode, self.rng.generator)
        score.g = g
        score.selected = int(np.argmax(g.data))
        return score, h_rd, valid

    def resolve_textual(self, q: Tensor, h_rd: Tensor,
                        h_valid: Optional[np.ndarray] = None) -> Tuple[Tensor, List[np.ndarray]]:
        """q* = (GAT([q || h_rd]) + [q || h_rd])[:N_q]"""
        if self.text_gat is None:
            return q, []
        n_q, n_h = q.shape[0], h_rd.shape[0]
        valid = None
        if h_valid is not None:
            valid = np.r_[np.ones(n_q, dtype=bool), np.asarray(h_valid, dtype=bool)]
        graph = BipartiteGraph(tc.concat([q, h_rd], axis=0), n_q, n_h, valid)
        updated, alphas = gat_layer(graph, self.text_gat)
        return tc.slice_along(self.out_dropout(updated) + graph.features, 0, 0, n_q), alphas

    def resolve_visual(self, v: Tensor, q_star: Tensor) -> Tuple[Tensor, List[np.ndarray]]:
        """v* = (GAT([v || q*]) + [v || q*])[:N_v]"""
        if self.video_gat is None:
            return v, []
        n_v = v.shape[0]
        graph = BipartiteGraph(tc.concat([v, q_star], axis=0), n_v, q_star.shape[0])
        updated, alphas = gat_layer(graph, self.video_gat)
        return tc.slice_along(self.out_dropout(updated) + graph.features, 0, 0, n_v), alphas
