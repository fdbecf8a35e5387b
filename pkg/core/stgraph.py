"""
Spatio-temporal Video Reasoner
Builds the block-tridiagonal object graph E_st from box geometry and labels,
derives n-hop adjacencies A_n = Bool(E_st^n), and runs gradually-neighboring
graph attention where each head sees a different A_n.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from core.coref import GraphAttention
from core.encoders import VideoObjects
from core.errors import ConfigError, ContractError
from core.layers import Dropout, Module, RngHolder
from core.settings import allocate_heads
from core.tensor import Tensor

logger = logging.getLogger(__name__)


def box_centers(boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Centers (x + w/2, y + h/2) of [x, y, w, h] boxes"""
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes[..., 0] + boxes[..., 2] / 2.0, boxes[..., 1] + boxes[..., 3] / 2.0


def _center_distance(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    ax, ay = box_centers(boxes_a)
    bx, by = box_centers(boxes_b)
    return np.maximum(np.abs(ax[:, None] - bx[None, :]), np.abs(ay[:, None] - by[None, :]))


def spatial_edges(boxes_t: np.ndarray, tau_s: float = 0.4) -> np.ndarray:
    """E_t[i, j] = 1 iff max(|dcx|, |dcy|) < tau_s; the diagonal is always 1"""
    edges = _center_distance(boxes_t, boxes_t) < tau_s
    np.fill_diagonal(edges, True)
    return edges


def temporal_edges(boxes_t: np.ndarray, boxes_next: np.ndarray, labels_t: Sequence[str],
                   labels_next: Sequence[str], tau_t: float = 0.2) -> np.ndarray:
    """E_t^{t+1}[i, j] = 1 iff same label and max(|dcx|, |dcy|) < tau_t"""
    same_label = np.asarray(labels_t, dtype=object)[:, None] == np.asarray(labels_next, dtype=object)[None, :]
    return same_label & (_center_distance(boxes_t, boxes_next) < tau_t)


def assemble_E_st(spatial: Sequence[np.ndarray], temporal: Sequence[np.ndarray]) -> np.ndarray:
    """Diagonal blocks E_t, super-diagonal E_t^{t+1}, sub-diagonal their transposes, zeros elsewhere"""
    T = len(spatial)
    if T < 1:
        raise ContractError("assemble_E_st needs at least one frame")
    if len(temporal) != T - 1:
        raise ContractError(f"{T} frames need {T - 1} temporal blocks, got {len(temporal)}")
    O = spatial[0].shape[0]
    E = np.zeros((T * O, T * O), dtype=bool)
    for t in range(T):
        E[t * O:(t + 1) * O, t * O:(t + 1) * O] = spatial[t]
    for t, block in enumerate(temporal):
        E[t * O:(t + 1) * O, (t + 1) * O:(t + 2) * O] = block
        E[(t + 1) * O:(t + 2) * O, t * O:(t + 1) * O] = block.T
    return E


def build_E_st(video: VideoObjects, tau_s: float = 0.4, tau_t: float = 0.2) -> np.ndarray:
    spatial = [spatial_edges(video.boxes[t], tau_s) for t in range(video.T)]
    temporal = [
        temporal_edges(video.boxes[t], video.boxes[t + 1], video.labels[t], video.labels[t + 1], tau_t)
        for t in range(video.T - 1)
    ]
    return assemble_E_st(spatial, temporal)


def adjacency_powers(E_st: np.ndarray, distances: Sequence[int] = (1, 2, 3, 4)) -> List[np.ndarray]:
    """
    A_n = Bool(E_st^n) by repeated boolean multiplication

    With the unit diagonal this equals reachability within n hops.
    """
    E = np.asarray(E_st, dtype=bool)
    if not np.all(np.diag(E)):
        raise ContractError("E_st must have a unit diagonal")
    E_int = E.astype(np.int64)
    powers = {}
    current = E
    for n in range(1, max(distances) + 1):
        if n > 1:
            current = (current.astype(np.int64) @ E_int) > 0
        powers[n] = current
    return [powers[n] for n in distances]


def reachability_oracle(E_st: np.ndarray, n: int) -> np.ndarray:
    """Breadth-first <= n-hop reachability, independent of matrix powers"""
    graph = nx.from_numpy_array(np.asarray(E_st, dtype=int))
    reach = np.zeros(E_st.shape, dtype=bool)
    for source in graph.nodes:
        for target in nx.single_source_shortest_path_length(graph, source, cutoff=n):
            reach[source, target] = True
    return reach


@dataclass
class SpatioTemporalGraph:
    """E_st plus its adjacency stack and the head allocation over distances"""
    E_st: np.ndarray
    distances: List[int]
    A: List[np.ndarray]
    head_assignment: Dict[int, int]
    num_frames: int = 1

    @classmethod
    def from_video(cls, video: VideoObjects, tau_s: float, tau_t: float, distances: Sequence[int],
                   head_assignment: Optional[Dict[int, int]] = None, K: int = 8) -> "SpatioTemporalGraph":
        E = build_E_st(video, tau_s, tau_t)
        assignment = head_assignment or allocate_heads(list(distances), K)
        return cls(E_st=E, distances=list(distances), A=adjacency_powers(E, distances),
                   head_assignment=dict(assignment), num_frames=video.T)

    @property
    def num_heads(self) -> int:
        return sum(self.head_assignment.values())

    def head_masks(self) -> List[np.ndarray]:
        """One mask per head, ordered by distance"""
        masks = []
        for n, A_n in zip(self.distances, self.A):
            masks.extend([A_n] * self.head_assignment.get(n, 0))
        return masks

    def coordinate_lists(self) -> Dict[str, List[List[int]]]:
        """Sparse [i, j] lists of E_st and each A_n for debug dumps"""
        dump = {"E_st": np.argwhere(self.E_st).tolist()}
        for n, A_n in zip(self.distances, self.A):
            dump[f"A_{n}"] = np.argwhere(A_n).tolist()
        return dump

    def verify(self) -> List[str]:
        """Check structural invariants and the BFS oracle; returns a list of violations"""
        problems = []
        E = self.E_st
        if not np.array_equal(E, E.T):
            problems.append("E_st is not symmetric")
        if not np.all(np.diag(E)):
            problems.append("E_st diagonal is not all ones")
        O = E.shape[0] // max(self.num_frames, 1)
        frame = np.arange(E.shape[0]) // max(O, 1)
        if np.any(E & (np.abs(frame[:, None] - frame[None, :]) >= 2)):
            problems.append("E_st links frames two or more apart")
        for n, A_n in zip(self.distances, self.A):
            if not np.array_equal(A_n, reachability_oracle(E, n)):
                problems.append(f"A_{n} disagrees with BFS reachability")
        for (n1, lower), (n2, upper) in zip(zip(self.distances, self.A), zip(self.distances[1:], self.A[1:])):
            if np.any(lower & ~upper):
                problems.append(f"A_{n1} is not contained in A_{n2}")
        return problems


class VideoReasoner(Module):
    """Gradually-neighboring multi-head graph attention over the object graph"""

    def __init__(self, rng: np.random.Generator, d: int, K: int, rng_holder: RngHolder,
                 dropout: float = 0.0, residual: bool = True):
        self.gat = GraphAttention(rng, d, K, Dropout(dropout, rng_holder))
        self.out_dropout = Dropout(dropout, rng_holder)
        self.residual = residual

    def gn_gat(self, v_star: Tensor, graph: SpatioTemporalGraph) -> Tuple[Tensor, List[np.ndarray]]:
        if graph.num_heads != self.gat.K:
            raise ConfigError(f"head assignment covers {graph.num_heads} heads, layer has {self.gat.K}")
        updated, alphas = self.gat(v_star, graph.head_masks())
        updated = self.out_dropout(updated)
        return (updated + v_star if self.residual else updated), alphas
