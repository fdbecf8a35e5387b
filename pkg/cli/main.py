"""
Command-line entry point for SCGA
gen-data | train | evaluate | decode | check-grads | dump-attention | dump-graph
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

# Ensure the project root is importable regardless of current working directory.
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

load_dotenv(PROJECT_ROOT / ".env")

from core.checkpoint import model_from_checkpoint
from core.dataset_io import VOCAB_FILE, build_vocabulary, dataset_path, read_dataset, write_dataset
from core.dialogue_world import WorldSpec, generate_dataset, split_seeds
from core.encoders import Vocabulary
from core.errors import ConfigError, ContractError, DatasetError, NumericError
from core.gradcheck import TOLERANCE, failed_checks, gradient_suite
from core.log import configure_logging
from core.model import SCGAModel
from core.settings import SCGAConfig, load_config
from core.stgraph import SpatioTemporalGraph
from core.trainer import Trainer, evaluate
from cli.services.export_service import ExportService

logger = logging.getLogger("scga.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage problems map to exit code 1 here"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_assignment(text: str) -> tuple:
    if "=" not in text:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _overrides(args: argparse.Namespace, keys: Sequence[str]) -> Dict[str, Any]:
    values = {key: getattr(args, key, None) for key in keys}
    for assignment in getattr(args, "set", None) or []:
        key, value = _parse_assignment(assignment)
        values[key] = value
    return values


def _config(args: argparse.Namespace, keys: Sequence[str] = ()) -> SCGAConfig:
    return load_config(args.config, _overrides(args, keys))


def _limit(samples: List, limit: Optional[int]) -> List:
    return samples[:limit] if limit is not None else samples


def _count(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a count of at least 0, got {value}")
    return value


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _config(args, ("seed",))
    spec = WorldSpec.from_config(config)
    train_seed, eval_seed = split_seeds(spec.seed)
    train = generate_dataset(spec, args.train or config.train_samples, train_seed)
    held_out = generate_dataset(spec, args.eval or config.eval_samples, eval_seed)
    out = Path(args.out)
    write_dataset(dataset_path(out, "train"), train)
    write_dataset(dataset_path(out, "eval"), held_out)
    vocab = build_vocabulary(train + held_out)
    vocab.save(out / VOCAB_FILE)
    print(f"wrote {len(train)} train / {len(held_out)} eval samples and {len(vocab)} vocabulary entries to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args, ("epochs", "batch_size", "warmup", "lr_factor", "dropout", "seed"))
    data = Path(args.data)
    vocab = Vocabulary.load(data / VOCAB_FILE)
    train = read_dataset(dataset_path(data, "train"))
    held_out = read_dataset(dataset_path(data, "eval"))
    model = SCGAModel(config, vocab)
    trainer = Trainer(config, model, train, held_out, Path(args.run_dir))
    trainer.fit(resume=args.resume)
    print(ExportService().metrics_summary(trainer.metrics_path))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, _ = model_from_checkpoint(Path(args.checkpoint))
    samples = _limit(read_dataset(dataset_path(Path(args.data), args.split)), args.limit)
    metrics = evaluate(model, samples, decode=not args.no_decode, beam=args.beam)
    print(f"samples           {metrics.samples}")
    print(f"loss              {metrics.loss:.6f}")
    print(f"token accuracy    {metrics.token_accuracy:.4f}")
    if metrics.referent_accuracy is not None:
        print(f"referent accuracy {metrics.referent_accuracy:.4f}")
    if metrics.exact_match is not None:
        print(f"exact match       {metrics.exact_match:.4f}")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    model, _ = model_from_checkpoint(Path(args.checkpoint))
    penalty = model.config.length_penalty if args.length_penalty is None else args.length_penalty
    samples = _limit(read_dataset(dataset_path(Path(args.data), args.split)), args.limit)
    exporter = ExportService()
    records = []
    for sample in samples:
        hyp, _ = model.decode(sample, beam=args.beam, length_penalty=penalty)
        records.append(exporter.decode_record(sample, hyp, penalty))
    count = exporter.write_lines(Path(args.out), records)
    exact = sum(r["words"] == r["reference"] for r in records)
    print(f"decoded {count} samples ({'greedy' if args.beam is None else f'beam {args.beam}'}), "
          f"exact match {exact}/{count} -> {args.out}")
    return EXIT_OK


def cmd_check_grads(args: argparse.Namespace) -> int:
    report = gradient_suite(range(args.seeds), end_to_end=not args.skip_end_to_end)
    width = max(len(name) for name in report)
    for name, err in report.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    failed = failed_checks(report)
    if args.report:
        ExportService(indent=2).write_json(args.report, {"tolerance": TOLERANCE, "errors": report, "failed": failed})
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_dump_attention(args: argparse.Namespace) -> int:
    model, _ = model_from_checkpoint(Path(args.checkpoint))
    samples = _limit(read_dataset(dataset_path(Path(args.data), args.split)), args.limit)
    exporter = ExportService()
    count = exporter.write_lines(Path(args.out), (exporter.attention_record(model, s) for s in samples))
    print(f"wrote attention maps for {count} samples -> {args.out}")
    return EXIT_OK


def cmd_dump_graph(args: argparse.Namespace) -> int:
    config = _config(args, ("tau_s", "tau_t"))
    samples = _limit(read_dataset(dataset_path(Path(args.data), args.split)), args.limit)
    exporter = ExportService()
    records = []
    for sample in samples:
        graph = SpatioTemporalGraph.from_video(sample.video, config.tau_s, config.tau_t, config.distances,
                                               config.head_assignment(), config.K)
        records.append(exporter.graph_record(sample, graph, verify=args.verify))
    count = exporter.write_lines(Path(args.out), records)
    print(f"wrote {count} graphs -> {args.out}")
    if args.verify:
        broken = [r["id"] for r in records if r["violations"]]
        if broken:
            raise NumericError(f"graph invariants violated for {len(broken)} samples, first {broken[0]}")
        print("all adjacency powers match breadth-first reachability")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scga", description="Structured co-reference graph attention for video-grounded dialogue")
    parser.add_argument("--config", type=Path, default=None, help="Flat JSON config (default: config.json)")
    parser.add_argument("--log-level", default=None, help="Overrides SCGA_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p, split=True):
        p.add_argument("--data", type=Path, required=True, help="Directory written by gen-data")
        if split:
            p.add_argument("--split", choices=("train", "eval"), default="eval")
        p.add_argument("--limit", type=_count, default=None, help="Only the first N samples")

    def set_arg(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key")

    p = sub.add_parser("gen-data", help="Generate a synthetic dataset and vocabulary")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train", type=int, default=None, help="Train samples")
    p.add_argument("--eval", type=int, default=None, help="Eval samples")
    p.add_argument("--out", type=Path, required=True)
    set_arg(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="Train a model; keeps best.ckpt and last.ckpt in the run directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--resume", action="store_true", help="Continue from last.ckpt")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--lr-factor", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    set_arg(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="Print metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    data_args(p)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--no-decode", action="store_true", help="Skip exact-match decoding")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("decode", help="Greedy or beam decoding of a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    data_args(p)
    p.add_argument("--beam", type=int, default=None, help="Beam width (greedy when omitted)")
    p.add_argument("--length-penalty", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("check-grads", help="Finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--skip-end-to-end", action="store_true")
    p.add_argument("--report", type=Path, default=None, help="Also write the per-check errors as JSON")
    p.set_defaults(handler=cmd_check_grads)

    p = sub.add_parser("dump-attention", help="Export attention maps")
    p.add_argument("--checkpoint", type=Path, required=True)
    data_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_dump_attention)

    p = sub.add_parser("dump-graph", help="Export E_st and adjacency powers as coordinate lists")
    data_args(p)
    p.add_argument("--verify", action="store_true", help="Check against breadth-first reachability")
    p.add_argument("--out", type=Path, required=True)
    set_arg(p)
    p.set_defaults(handler=cmd_dump_graph)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        return args.handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"Usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"Data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"Numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
