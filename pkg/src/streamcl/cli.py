"""Command-line entry point: ``streamcl {run,gen-synthetic,import-csv,report}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .dataset import Dataset, DatasetFormatError, gen_synthetic, import_csv, write_dataset
from .memory import ReplacementPolicy, SamplingStrategy
from .ordering import MissingMetadata, OrderingKind
from .runner import format_table, read_summary, run
from .trainer import LearnerKind
from .vbnn import NonFiniteGradient

log = logging.getLogger("streamcl")


def _csv_choices(choices):
    allowed = [c.value for c in choices]

    def parse(text: str) -> str:
        for part in text.split(","):
            if part.strip() not in allowed:
                raise argparse.ArgumentTypeError(f"invalid choice {part!r} (choose from {', '.join(allowed)})")
        return text

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamcl", description="Streaming class-incremental learning experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run experiments and write a results file")
    r.add_argument("--config")
    r.add_argument("--dataset")
    r.add_argument("--test-dataset")
    r.add_argument("--ordering", type=_csv_choices(OrderingKind), help="one or more orderings, comma separated")
    r.add_argument("--learners", type=_csv_choices(LearnerKind))
    r.add_argument("--policy", choices=[c.value for c in ReplacementPolicy])
    r.add_argument("--sampling", choices=[c.value for c in SamplingStrategy])
    r.add_argument("--lambda1", type=float)
    r.add_argument("--lambda2", type=float)
    r.add_argument("--capacity", type=int)
    r.add_argument("--hidden", type=lambda s: [int(x) for x in s.split(",")], help="hidden widths, e.g. 256,256")
    r.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    r.add_argument("--out")
    r.add_argument("--workers", type=int, help="worker processes (default: available processors)")

    g = sub.add_parser("gen-synthetic", help="write a synthetic embedding dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--instances", type=int, default=3)
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--spread", type=float, default=0.1, help="per-frame random-walk step scale")
    g.add_argument("--instance-spread", type=float, default=0.3)
    g.add_argument("--test-frames", type=int, default=0, help="held-out frames per instance")
    g.add_argument("--test-out", help="file for held-out frames (required with --test-frames)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    c = sub.add_parser("import-csv", help="convert a CSV of embeddings to the binary format")
    c.add_argument("csv")
    c.add_argument("--classes", type=int)
    c.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="print the Omega_all table of a results file")
    rep.add_argument("results")
    return p


def _cmd_run(args) -> int:
    overrides = {
        "dataset": args.dataset, "test_dataset": args.test_dataset, "kinds": args.ordering,
        "learners": args.learners, "policy": args.policy, "sampling": args.sampling,
        "lambda1": args.lambda1, "lambda2": args.lambda2, "buffer_capacity": args.capacity,
        "hidden_dims": args.hidden, "seeds": args.seeds, "out": args.out, "workers": args.workers,
    }
    cfg = load_config(args.config, overrides)
    summary = run(cfg)
    print(format_table(summary))
    print(f"results written to {cfg.out}")
    return 0


def _cmd_gen(args) -> int:
    if bool(args.test_frames) != bool(args.test_out):
        raise ConfigError("--test-frames and --test-out must be given together")
    ds = gen_synthetic(args.classes, args.instances, args.frames, args.dim, args.spread, args.seed,
                       instance_spread=args.instance_spread, test_frames_per_instance=args.test_frames)
    if args.test_frames:
        train, test = ds
        write_dataset(args.out, train)
        write_dataset(args.test_out, test)
    else:
        write_dataset(args.out, ds)
    return 0


def _cmd_csv(args) -> int:
    ds: Dataset = import_csv(args.csv, args.classes)
    write_dataset(args.out, ds)
    print(f"{len(ds.records)} records, {ds.n_classes} classes, d={ds.dim}, "
          f"metadata={'yes' if ds.has_metadata else 'no'}")
    return 0


def _cmd_report(args) -> int:
    print(format_table(read_summary(args.results)))
    return 0


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "gen-synthetic": _cmd_gen, "import-csv": _cmd_csv, "report": _cmd_report}
    try:
        return handler[args.command](args)
    except (ConfigError, MissingMetadata, DatasetFormatError, FileNotFoundError) as exc:
        print(f"streamcl: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, NonFiniteGradient) as exc:
        print(f"streamcl: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
