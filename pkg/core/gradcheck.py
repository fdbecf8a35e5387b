"""
Finite-difference gradient oracle for every differentiable operation and for the
end-to-end model loss
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from core import tensor as tc
from core.tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)


def _entries(size: int, max_entries: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    rng = rng if rng is not None else tc.make_rng(0)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = STEP,
                       entries: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central differences (f(x + h) - f(x - h)) / 2h at the chosen flat entries; others are left at 0"""
    grad = np.zeros(x.data.size)
    flat = x.data.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        original = flat[i]
        with tc.no_grad():
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
        flat[i] = original
        grad[i] = (upper - lower) / (2.0 * h)
    return grad.reshape(x.data.shape)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = STEP,
                    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare backward() against central differences

    Args:
        fn: Recomputes a scalar loss from the current values of inputs
        inputs: Tensors to differentiate (requires_grad must be set)
        h: Finite-difference step
        max_entries: Check at most this many entries per input, chosen at random

    Returns:
        Max relative error |a - n| / max(|a| + |n|, 1e-6) over all checked entries
    """
    tc.zero_grad(inputs)
    tc.backward(fn())
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        entries = _entries(x.data.size, max_entries, rng)
        numeric = numerical_gradient(fn, x, h, entries)
        err = relative_error(analytic.reshape(-1)[entries], numeric.reshape(-1)[entries])
        if err.size:
            worst = max(worst, float(err.max()))
    tc.zero_grad(inputs)
    return worst


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Parameter:
    return Parameter(rng.uniform(low, high, size=shape))


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar projection sum(out * w) so every output entry matters"""
    return tc.sum(out * w)


def _op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (fn, inputs)"""
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    row = _param(rng, 1, 4)
    pos = _param(rng, 3, 4, low=0.5, high=2.0)
    m1, m2 = _param(rng, 3, 5), _param(rng, 5, 2)
    w34, w43, w12, w32 = (rng.standard_normal(s) for s in ((3, 4), (4, 3), (12,), (3, 2)))
    table = _param(rng, 6, 4)
    gain, bias = _param(rng, 4, low=0.5, high=1.5), _param(rng, 4)
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    targets = (rng.random((3, 4)) < 0.5).astype(float)
    drop_seed = int(rng.integers(1 << 30))

    return {
        "add": (lambda: _weighted(a + row, w34), [a, row]),
        "sub": (lambda: _weighted(a - b, w34), [a, b]),
        "mul": (lambda: _weighted(a * b, w34), [a, b]),
        "div": (lambda: _weighted(a / pos, w34), [a, pos]),
        "neg": (lambda: _weighted(-a, w34), [a]),
        "exp": (lambda: _weighted(tc.exp(a), w34), [a]),
        "log": (lambda: _weighted(tc.log(pos), w34), [pos]),
        "relu": (lambda: _weighted(tc.relu(a), w34), [a]),
        "leaky_relu": (lambda: _weighted(tc.leaky_relu(a), w34), [a]),
        "sigmoid": (lambda: _weighted(tc.sigmoid(a), w34), [a]),
        "log_sigmoid": (lambda: _weighted(tc.log_sigmoid(a), w34), [a]),
        "matmul": (lambda: _weighted(tc.matmul(m1, m2), w32), [m1, m2]),
        "transpose": (lambda: _weighted(tc.transpose(a), w43), [a]),
        "reshape": (lambda: _weighted(tc.reshape(a, (12,)), w12), [a]),
        "sum": (lambda: _weighted(tc.sum(a, axis=1), w34[:, 0]), [a]),
        "mean": (lambda: _weighted(tc.mean(a, axis=0, keepdims=True), w34[:1]), [a]),
        "concat": (lambda: _weighted(tc.concat([a, b], axis=1), np.hstack([w34, w34[:, ::-1]])), [a, b]),
        "slice_along": (lambda: _weighted(tc.slice_along(a, 1, 1, 3), w32), [a]),
        "gather_rows": (lambda: _weighted(tc.gather_rows(table, [0, 2, 2]), w34), [table]),
        "softmax": (lambda: _weighted(tc.softmax(a, axis=1, mask=mask), w34), [a]),
        "layer_norm": (lambda: _weighted(tc.layer_norm(a, gain, bias), w34), [a, gain, bias]),
        "dropout": (lambda: _weighted(tc.dropout(a, 0.3, tc.make_rng(drop_seed), True), w34), [a]),
        "bce_with_logits": (lambda: tc.bce_with_logits(a, targets), [a]),
    }


def _module_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    from core.coref import GraphAttention
    from core.decoder import MultiHeadAttention, causal_mask

    gat = GraphAttention(rng, 4, 2)
    V = _param(rng, 5, 4)
    masks = [rng.random((5, 5)) < 0.5 for _ in range(2)]
    for m in masks:
        np.fill_diagonal(m, True)
    mha = MultiHeadAttention(rng, 4, 2)
    Q, Kx = _param(rng, 3, 4), _param(rng, 3, 4)
    w54, w34 = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    return {
        "graph_attention": (lambda: _weighted(gat(V, masks)[0], w54), [V] + gat.parameters()),
        "multi_head_attention": (lambda: _weighted(mha(Q, Kx, causal_mask(3))[0], w34), [Q, Kx] + mha.parameters()),
    }


def _end_to_end_case(seed: int) -> tuple:
    """
    Tiny model on a first-round sample in eval mode

    With a single history unit the hard selection is constant, so the
    straight-through gradient coincides with the true gradient.
    """
    from core.dialogue_world import WorldSpec, generate_dialogue, generate_world
    from core.encoders import Vocabulary
    from core.model import SCGAModel
    from core.settings import build_config

    config = build_config({"d": 8, "K": 2, "d_v": 4, "T": 2, "O": 2, "distances": [1, 2],
                           "dropout": 0.0, "seed": seed, "rounds": 1})
    spec = WorldSpec(seed=seed, frames=2, objects=2, d_v=4, rounds=1)
    rng = tc.make_rng(seed)
    sample = generate_dialogue(generate_world(spec, rng), 1, rng)[0]
    vocab = Vocabulary.build([sample.caption, sample.question, sample.answer])
    model = SCGAModel(config, vocab).eval()
    return (lambda: model.loss(sample).loss), model.parameters()


def gradient_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), end_to_end: bool = True,
                   max_entries: int = 8) -> Dict[str, float]:
    """
    Max relative error per check across seeds

    Returns:
        Map check name -> worst relative error
    """
    report: Dict[str, float] = {}
    for seed in seeds:
        rng = tc.make_rng(seed)
        cases = {**_op_cases(rng), **_module_cases(rng)}
        if end_to_end:
            cases["end_to_end_loss"] = _end_to_end_case(seed)
        for name, (fn, inputs) in cases.items():
            limit = max_entries if name == "end_to_end_loss" else None
            err = check_gradients(fn, inputs, max_entries=limit, rng=rng)
            report[name] = max(report.get(name, 0.0), err)
            logger.debug("seed %d %-22s %.3e", seed, name, err)
    return report


def failed_checks(report: Dict[str, float], tolerance: float = TOLERANCE) -> List[str]:
    return [name for name, err in report.items() if not err < tolerance]
