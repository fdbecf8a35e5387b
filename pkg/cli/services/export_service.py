"""
Export Service
Writes decode records, attention maps, graph dumps and metric summaries as structured text
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from core import tensor as tc
from core.decoder import Hypothesis
from core.dialogue_world import DialogueSample
from core.encoders import BOS
from core.model import SCGAModel
from core.stgraph import SpatioTemporalGraph
from core.trainer import summarize_metrics


def _matrices(arrays: Iterable[np.ndarray]) -> List[List[List[float]]]:
    return [np.asarray(a).tolist() for a in arrays]


def _head_mean(arrays: Sequence[np.ndarray]) -> List[List[float]]:
    """Attention averaged over heads; empty when the layer is switched off"""
    return np.mean(np.stack(arrays), axis=0).tolist() if len(arrays) else []


class ExportService:
    """Serialize model outputs for inspection and oracle comparison"""

    def __init__(self, indent: Optional[int] = None):
        self.indent = indent

    def write_lines(self, path: Path, records: Iterable[Dict[str, Any]]) -> int:
        """One JSON object per line"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
                count += 1
        return count

    def write_json(self, path: Path, payload: Dict[str, Any]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=self.indent, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    def decode_record(self, sample: DialogueSample, hyp: Hypothesis, length_penalty: float = 1.0) -> Dict[str, Any]:
        """
        Args:
            sample: Decoded sample
            hyp: Chosen hypothesis
            length_penalty: Used for the normalized score

        Returns:
            {id, tokens, words, segments, score, normalized_score, finished, reference}
        """
        return {
            "id": sample.sample_id,
            "tokens": list(hyp.tokens),
            "words": list(hyp.words),
            "segments": list(hyp.segments),
            "score": hyp.score,
            "normalized_score": hyp.normalized(length_penalty),
            "finished": hyp.finished,
            "reference": list(sample.answer),
        }

    def attention_record(self, model: SCGAModel, sample: DialogueSample) -> Dict[str, Any]:
        """Selection scores, per-head co-reference / GN-GAT weights and decoder weights over the greedy answer"""
        hyp, context = model.decode(sample)
        was_training = model.training
        model.eval()
        trace: Dict[str, Any] = {}
        try:
            with tc.no_grad():
                a_in = model.text_encoder([BOS] + list(hyp.tokens))
                model.decoder.decoder_forward(a_in, context.decoder_state(), trace)
        finally:
            model.train(was_training)
        selection = context.selection
        return {
            "id": sample.sample_id,
            "selection": {
                "scores": selection.s.data.tolist(),
                "g": selection.g.data.tolist(),
                "selected": selection.selected,
                "referent": sample.referent,
            },
            "textual": _matrices(context.attention["textual"]),
            "textual_mean": _head_mean(context.attention["textual"]),
            "visual": _matrices(context.attention["visual"]),
            "visual_mean": _head_mean(context.attention["visual"]),
            "spatiotemporal": _matrices(context.attention["spatiotemporal"]),
            "decoder": {
                block: {stage: _matrices(weights) for stage, weights in entry["weights"].items()}
                for block, entry in trace.items()
            },
            "answer": list(hyp.words),
        }

    def graph_record(self, sample: DialogueSample, graph: SpatioTemporalGraph, verify: bool = False) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "id": sample.sample_id,
            "num_nodes": int(graph.E_st.shape[0]),
            "head_assignment": {str(n): k for n, k in graph.head_assignment.items()},
            **graph.coordinate_lists(),
        }
        if verify:
            record["violations"] = graph.verify()
        return record

    def metrics_summary(self, metrics_path: Path) -> str:
        """Plain-text table of the metrics log plus the best epoch"""
        frame, best = summarize_metrics(metrics_path)
        lines = [frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")]
        lines.append(f"best epoch {int(best['epoch'])}: val_loss {best['val_loss']:.4f}")
        return "\n".join(lines)
