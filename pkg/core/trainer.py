"""
Training loop - shuffled mini-batches, warmup / inverse-sqrt learning rate, Adam,
per-epoch validation, best and last checkpoints, append-only metrics log
"""
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from core import tensor as tc
from core.checkpoint import TrainingPosition, load_checkpoint, restore, save_checkpoint
from core.dialogue_world import DialogueSample
from core.errors import ContractError, NumericError
from core.model import SCGAModel
from core.settings import SCGAConfig

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


def lr_schedule(step: int, d_model: int, warmup: int = 10000, factor: float = 1.0) -> float:
    """
    factor * d^-0.5 * min(step^-0.5, step * warmup^-1.5)

    Linear ramp to the peak at step == warmup, inverse square-root decay afterwards.
    """
    if step < 1:
        raise ContractError(f"learning rate schedule starts at step 1, got {step}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class EvalMetrics:
    loss: float
    token_accuracy: float
    referent_accuracy: Optional[float]
    exact_match: Optional[float]
    samples: int


def evaluate(model: SCGAModel, samples: Sequence[DialogueSample], decode: bool = True,
             beam: Optional[int] = None) -> EvalMetrics:
    """
    Mean per-step BCE, teacher-forced token accuracy, referent selection accuracy
    and exact-match decode rate, all in eval mode

    Args:
        model: Model to score (its training flag is restored afterwards)
        samples: Evaluation split
        decode: Also decode every sample for exact match
        beam: Beam width for exact match (greedy when None)
    """
    if not samples:
        raise ContractError("evaluate needs at least one sample")
    was_training = model.training
    model.eval()
    losses, hits, steps, referent_hits, referent_total, exact = [], 0, 0, 0, 0, 0
    try:
        for sample in samples:
            with tc.no_grad():
                result = model.loss(sample)
            losses.append(result.loss.item())
            hits += result.token_hits
            steps += result.steps
            if sample.referent is not None:
                referent_total += 1
                referent_hits += int(result.context.selection.selected == sample.referent)
            if decode:
                hyp, _ = model.decode(sample, beam=beam)
                exact += int(hyp.words == list(sample.answer))
    finally:
        model.train(was_training)
    return EvalMetrics(
        loss=float(np.mean(losses)),
        token_accuracy=hits / steps,
        referent_accuracy=referent_hits / referent_total if referent_total else None,
        exact_match=exact / len(samples) if decode else None,
        samples=len(samples),
    )


class Trainer:
    """Owns the optimization state of one run directory"""

    def __init__(self, config: SCGAConfig, model: SCGAModel, train_samples: Sequence[DialogueSample],
                 eval_samples: Sequence[DialogueSample], run_dir: Path, show_progress: Optional[bool] = None):
        if not train_samples:
            raise ContractError("training needs a non-empty dataset")
        self.config = config
        self.model = model
        self.train_samples = list(train_samples)
        self.eval_samples = list(eval_samples) or self.train_samples
        self.run_dir = Path(run_dir)
        self.position = TrainingPosition()
        if show_progress is None:
            show_progress = sys.stderr.isatty() and logging.getLogger().getEffectiveLevel() <= logging.INFO
        self.show_progress = show_progress

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_FILE

    def current_lr(self, step: Optional[int] = None) -> float:
        return lr_schedule(step or max(self.position.step, 1), self.config.d, self.config.warmup, self.config.lr_factor)

    def train_step(self, batch: Sequence[DialogueSample]) -> float:
        """Average the per-sample losses of one batch, then take one Adam step"""
        self.model.train()
        self.model.zero_grad()
        total = 0.0
        for sample in batch:
            result = self.model.loss(sample)
            value = result.loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {self.position.epoch + 1}, "
                    f"step {self.position.step + 1}, sample {sample.sample_id}"
                )
            tc.backward(result.loss * (1.0 / len(batch)))
            total += value
        self.position.step += 1
        lr = self.current_lr(self.position.step)
        tc.adam_step(self.model.parameters(), lr, self.config.beta1, self.config.beta2, self.config.eps)
        return total / len(batch)

    def batches(self) -> List[List[DialogueSample]]:
        order = self.model.rng.generator.permutation(len(self.train_samples))
        size = self.config.batch_size
        return [[self.train_samples[i] for i in order[start:start + size]] for start in range(0, len(order), size)]

    def resume(self) -> TrainingPosition:
        """Restore parameters, moments, rng stream and position from last.ckpt"""
        checkpoint = load_checkpoint(self.run_dir / LAST_CHECKPOINT)
        restore(self.model, checkpoint)
        self.position = checkpoint.position
        if self.metrics_path.exists():
            kept = [line for line in self.metrics_path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["epoch"] <= self.position.epoch]
            self.metrics_path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")
        logger.info("resumed at epoch %d, step %d", self.position.epoch, self.position.step)
        return self.position

    def _log_metrics(self, record: Dict) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def fit(self, epochs: Optional[int] = None, resume: bool = False) -> List[Dict]:
        """
        Train until the configured epoch count

        Returns:
            Metrics records of the epochs run in this call
        """
        epochs = epochs or self.config.epochs
        if resume:
            self.resume()
        elif self.metrics_path.exists():
            self.metrics_path.unlink()
        history = []
        for epoch in range(self.position.epoch + 1, epochs + 1):
            batches = self.batches()
            losses = []
            bar = tqdm(batches, desc=f"epoch {epoch}/{epochs}", unit="batch", disable=not self.show_progress)
            for batch in bar:
                losses.append(self.train_step(batch))
                bar.set_postfix(loss=f"{losses[-1]:.4f}")
            metrics = evaluate(self.model, self.eval_samples, decode=self.config.decode_eval)
            self.position.epoch = epoch
            record = {
                "epoch": epoch, "step": self.position.step, "lr": self.current_lr(),
                "train_loss": float(np.mean(losses)), "val_loss": metrics.loss,
                "token_acc": metrics.token_accuracy, "referent_acc": metrics.referent_accuracy,
                "exact_match": metrics.exact_match,
            }
            self._log_metrics(record)
            history.append(record)
            logger.info("epoch %d: train %.4f val %.4f token_acc %.3f", epoch, record["train_loss"],
                        metrics.loss, metrics.token_accuracy)
            if self.position.best_val_loss is None or metrics.loss < self.position.best_val_loss:
                self.position.best_val_loss = metrics.loss
                self.position.best_epoch = epoch
                save_checkpoint(self.run_dir / BEST_CHECKPOINT, self.model, self.position, asdict(metrics))
            save_checkpoint(self.run_dir / LAST_CHECKPOINT, self.model, self.position, asdict(metrics))
        return history


def summarize_metrics(path: Path) -> Tuple[pd.DataFrame, Dict]:
    """
    Load a metrics log

    Returns:
        (one row per epoch, the row with the lowest validation loss)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metrics log not found: {path}")
    frame = pd.read_json(path, lines=True)
    if frame.empty:
        raise ContractError(f"{path} holds no epochs")
    frame = frame.sort_values("epoch").reset_index(drop=True)
    best = frame.loc[frame["val_loss"].idxmin()].to_dict()
    return frame, best
