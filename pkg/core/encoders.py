"""
Input Encoder - token sequences and video objects to d-dimensional node features
"""
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from core.errors import BoundsError, ContractError, DatasetError
from core.layers import Embedding, LayerNorm, Linear, Module
from core.tensor import Tensor

BOS, EOS, UNK, PAD = 0, 1, 2, 3
RESERVED_TOKENS = ("<bos>", "<eos>", "<unk>", "<pad>")

TokenSequence = List[int]

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and punctuation"""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Token <-> index map; indices 0..3 are reserved for <bos>, <eos>, <unk>, <pad>"""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED_TOKENS)
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, words: Sequence[str]) -> TokenSequence:
        return [self.index(w) for w in words]

    def decode(self, indices: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in indices]

    @classmethod
    def build(cls, streams: Iterable[Sequence[str]]) -> "Vocabulary":
        """Most frequent first, ties alphabetical"""
        counts = Counter(w for stream in streams for w in stream if w not in RESERVED_TOKENS)
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ordered)

    def save(self, path: Path) -> None:
        """One token per line; line number = index after the reserved rows"""
        Path(path).write_text("".join(f"{tok}\n" for tok in self.itos[len(RESERVED_TOKENS):]), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for lineno, tok in enumerate(lines, start=1):
            if not tok or tok in RESERVED_TOKENS:
                raise DatasetError(f"invalid vocabulary entry {tok!r}", line=lineno)
        if len(set(lines)) != len(lines):
            raise DatasetError("duplicate vocabulary entries")
        return cls(lines)


@dataclass
class VideoObjects:
    """T x O grid of (appearance, box, label) records; node index = t * O + o"""

    appearance: np.ndarray  # T x O x d_v
    boxes: np.ndarray       # T x O x 4, [x, y, w, h] relative to the frame
    labels: List[List[str]]  # T x O

    @property
    def T(self) -> int:
        return self.appearance.shape[0]

    @property
    def O(self) -> int:
        return self.appearance.shape[1]

    @property
    def d_v(self) -> int:
        return self.appearance.shape[2]

    @property
    def num_nodes(self) -> int:
        return self.T * self.O

    def node_index(self, t: int, o: int) -> int:
        return t * self.O + o

    def validate(self) -> None:
        if self.appearance.ndim != 3:
            raise ContractError(f"appearance must be T x O x d_v, got {self.appearance.shape}")
        if self.boxes.shape != (self.T, self.O, 4):
            raise ContractError(f"boxes must be {(self.T, self.O, 4)}, got {self.boxes.shape}")
        if len(self.labels) != self.T or any(len(row) != self.O for row in self.labels):
            raise ContractError(f"labels must be a {self.T} x {self.O} grid")
        if not np.all(np.isfinite(self.appearance)):
            raise ContractError("appearance vectors must be finite")
        x, y, w, h = (self.boxes[..., i] for i in range(4))
        if np.any(self.boxes < 0) or np.any(x + w > 1 + 1e-6) or np.any(y + h > 1 + 1e-6):
            raise ContractError("boxes must lie inside the unit frame")


def positional_encoding(length: int, d: int) -> np.ndarray:
    """PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(pos / 10000^(2i/d))"""
    pos = np.arange(length, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, two_i / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    return table


class TextEncoder(Module):
    """LN(embedding(seq) + PE(seq)); the embedding is shared by question, history and decoder input"""

    def __init__(self, rng: np.random.Generator, vocab_size: int, d: int, max_len: int = 512):
        self.d = d
        self.vocab_size = vocab_size
        self.embedding = Embedding(rng, vocab_size, d)
        self.ln = LayerNorm(d)
        self._pe = positional_encoding(max_len, d)

    def _pe_rows(self, length: int) -> np.ndarray:
        if length > self._pe.shape[0]:
            self._pe = positional_encoding(2 * length, self.d)
        return self._pe[:length]

    def encode_text(self, seq: TokenSequence) -> Tensor:
        if len(seq) == 0:
            raise ContractError("encode_text needs at least one token")
        if max(seq) >= self.vocab_size or min(seq) < 0:
            raise BoundsError(f"token index outside vocabulary of size {self.vocab_size}")
        return self.ln(self.embedding(seq) + self._pe_rows(len(seq)))

    __call__ = encode_text


class VideoEncoder(Module):
    """Per-object LN(W * appearance), rows frame-major"""

    def __init__(self, rng: np.random.Generator, d_v: int, d: int):
        self.proj = Linear(rng, d_v, d, bias=False)
        self.ln = LayerNorm(d)

    def encode_video(self, video: VideoObjects) -> Tensor:
        flat = video.appearance.reshape(video.num_nodes, video.d_v)
        return self.ln(self.proj(Tensor(flat)))

    __call__ = encode_video


def build_history_units(caption: Sequence[str], turns: Sequence[Tuple[Sequence[str], Sequence[str]]]) -> List[List[str]]:
    """
    Dialogue history for round r = len(turns) + 1

    Returns:
        [caption, q1 + a1, ..., q_{r-1} + a_{r-1}] as word lists
    """
    units = [list(caption)]
    units.extend(list(q) + list(a) for q, a in turns)
    return units
