"""``protclip`` command line.

Subcommands: curate, stats, sample, train, gradcheck, ablate, replay.
Every run writes ``manifest.json`` into ``--out``; ``protclip replay`` re-runs
a manifest and the outputs it lists come back byte-identical.

Exit codes: 0 success, 1 I/O failure, 2 configuration or validation error,
3 internal invariant breach (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from . import tensor as T
from .config import TrainConfig, load_config
from .curation import (
    ClusterStats,
    cluster_key,
    cluster_statistics,
    filter_for_pretraining,
    ingest,
    load_corpus,
    sha256_file,
    write_manifest,
)
from .errors import InvariantBreach, IoFailure, ProtclipError, ValidationError
from .gradcheck import TOLERANCE, format_report, gradcheck
from .objectives import LossReport
from .sampler import build_distribution, build_index, make_rng, sample_batch
from .synthetic import PLANTED_FILE, TABLE1_FILE, data_path, records_to_jsonl
from .training import Trainer, interference

MANIFEST = "manifest.json"
FIXTURES = {"table1": TABLE1_FILE, "planted": PLANTED_FILE}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # name relative to out dir -> sha256
    version: str = __version__
    started: str = ""
    finished: str = ""

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
        }


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace, argv: list[str]) -> None:
        self.out = Path(args.out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create output directory {self.out}: {exc}") from exc
        self.manifest = RunManifest(args.command, argv, {}, args.seed, started=_now())

    def input(self, path: str | Path) -> Path:
        path = Path(path)
        self.manifest.inputs[str(path)] = sha256_file(path)
        return path

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        return self.track(name)

    def track(self, name: str) -> Path:
        path = self.out / name
        self.manifest.outputs[name] = sha256_file(path)
        return path

    def finish(self) -> Path:
        self.manifest.finished = _now()
        self.manifest.outputs = dict(sorted(self.manifest.outputs.items()))
        text = json.dumps(self.manifest.to_json(), indent=2, sort_keys=True) + "\n"
        path = self.out / MANIFEST
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _resolve_input(value: str) -> Path:
    if value.startswith("fixture:"):
        name = value.split(":", 1)[1]
        if name not in FIXTURES:
            raise ValidationError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
        return data_path(FIXTURES[name])
    return Path(value)


def _config(args: argparse.Namespace, **overrides) -> TrainConfig:
    if args.allow_unconstrained:
        overrides["allow_unconstrained"] = True
    config = load_config(args.config, seed=args.seed, **overrides)
    config.loss_config()  # rejects an invalid lambda pair before any work
    return config


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------------ commands


def cmd_curate(args, run: Run) -> int:
    path = run.input(_resolve_input(args.input))
    records, corpus = ingest(path, strict=args.strict)
    kept, _ = filter_for_pretraining(records)
    run.write("records.jsonl", records_to_jsonl(kept))
    run.write("stats_raw.csv", corpus.stats.to_csv())
    run.write("stats_filtered.csv", cluster_statistics(kept).to_csv())
    write_manifest(corpus, run.out / "corpus.json")
    run.track("corpus.json")
    rejected = sum(corpus.rejected.values())
    print(f"lines {corpus.lines_consumed}  valid {len(records)}  rejected {rejected}  kept {len(kept)}")
    for reason, n in sorted({**corpus.rejected, **corpus.dropped}.items()):
        print(f"  {reason}: {n}")
    return 0


def _marginal_rows(stats: ClusterStats) -> list[tuple]:
    rows = []
    by_conf, by_cov = {}, {}
    for key, n in stats.counts.items():
        by_conf[key.confidence] = by_conf.get(key.confidence, 0) + n
        by_cov[key.coverage] = by_cov.get(key.coverage, 0) + n
    total = stats.total
    for c, frac in sorted(stats.confidence_marginals().items()):
        rows.append(("confidence", c, by_conf.get(c, 0), f"{frac:.4f}"))
    for r, frac in sorted(stats.coverage_marginals().items()):
        rows.append(("coverage", f"{r.numerator}/{r.denominator}", by_cov.get(r, 0), f"{frac:.4f}"))
    rows.append(("total", "", total, "1.0000" if total else "0.0000"))
    return rows


def cmd_stats(args, run: Run) -> int:
    path = run.input(_resolve_input(args.input))
    records = load_corpus(path, strict=args.strict)
    if args.filtered:
        records, _ = filter_for_pretraining(records)
    stats = cluster_statistics(records)
    rows = _marginal_rows(stats)
    run.write("marginals.csv", _csv(("axis", "value", "count", "fraction"), rows))
    run.write("stats.csv", stats.to_csv())
    width = max(len(str(r[1])) for r in rows)
    for axis, value, count, frac in rows:
        print(f"{axis:<10} {str(value):>{width}} {count:>8} {frac}")
    return 0


def cmd_sample(args, run: Run) -> int:
    path = run.input(_resolve_input(args.input))
    records, _ = filter_for_pretraining(load_corpus(path, strict=args.strict))
    if args.k < 0:
        raise ValidationError("--k must be non-negative")
    ids: list[str] = []
    if args.k:
        dist = build_distribution(cluster_statistics(records), args.exponent, args.coverage_power)
        picks = sample_batch(dist, build_index(records, cluster_key), make_rng(args.seed), args.k)
        ids = [records[i].entry_name for i in picks]
    run.write("ids.txt", "".join(f"{i}\n" for i in ids))
    sys.stdout.write("".join(f"{i}\n" for i in ids))
    return 0


def _loss_csv(reports) -> str:
    return LossReport.CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in reports)


def cmd_train(args, run: Run) -> int:
    overrides = {}
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    config = _config(args, **overrides)
    run.manifest.config = config.to_dict()
    path = run.input(_resolve_input(args.input))
    trainer = Trainer(config, load_corpus(path, strict=args.strict))
    if args.resume:
        trainer.load(run.input(args.resume))
    reports = []
    while trainer.step < args.steps:
        report = trainer.train_step()
        reports.append(report)
        if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
            trainer.save(run.out / f"ckpt_{trainer.step:06d}.bin")
            run.track(f"ckpt_{trainer.step:06d}.bin")
        if args.log_every and trainer.step % args.log_every == 0:
            print(f"step {report.step:6d}  total {report.total:.4f}  gc {report.gc:.4f}  "
                  f"bsr {report.bsr:.4f}  pda {report.pda:.4f}  mlm {report.mlm:.4f}")
    run.write("loss.csv", _loss_csv(reports))
    trainer.save(run.out / "final.bin")
    run.track("final.bin")
    if args.eval:
        acc = trainer.evaluate_retrieval(config.batch_size)
        run.write("metrics.json", json.dumps({"retrieval_top1": acc, "step": trainer.step}, sort_keys=True) + "\n")
        print(f"retrieval top-1 {acc:.4f}")
    return 0


def cmd_gradcheck(args, run: Run) -> int:
    run.manifest.config = {"dim": args.dim, "n": args.n, "k": args.k, "seeds": args.seeds,
                           "tol": args.tol, "corrupt": args.corrupt}
    ctx = T.corrupt_backward(*args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        reports = [gradcheck(args.seed + s, args.dim, args.n, args.k) for s in range(args.seeds)]
    worst: dict[tuple[str, str], float] = {}
    for rep in reports:
        for loss, per_param in rep.worst.items():
            for name, err in per_param.items():
                worst[loss, name] = max(worst.get((loss, name), 0.0), err)
    run.write("report.csv", format_report(reports, args.tol))
    run.write("params.csv", _csv(("loss", "param", "worst_rel_error"),
                                 [(l, p, f"{e:.3e}") for (l, p), e in sorted(worst.items())]))
    failed = False
    for loss in reports[0].worst:
        err = max(rep.max_error(loss) for rep in reports)
        ok = err < args.tol
        failed |= not ok
        print(f"{loss:<6} max rel error {err:.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        run.finish()
        raise InvariantBreach(f"gradient check failed at tolerance {args.tol:g}")
    return 0


def _grid(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad grid {text!r}: {exc}") from None


def _pairs(text: str | None) -> list[tuple[float, float]]:
    out = []
    for item in (text or "").split(","):
        if item.strip():
            try:
                a, b = item.split(":")
                out.append((float(a), float(b)))
            except ValueError:
                raise ValidationError(f"bad weight pair {item!r}; expected L1:L2") from None
    return out


def ablation_settings(lambda1_grid, theta_grid, weight_pairs) -> list[tuple[str, dict]]:
    settings = []
    for l1 in lambda1_grid:
        settings.append((f"lambda1_{l1:g}", {"lambda1": l1, "lambda2": round(1.0 - l1, 12)}))
    for th in theta_grid:
        settings.append((f"theta_{th:g}", {"theta": th}))
    for l1, l2 in weight_pairs:
        settings.append((f"weights_{l1:g}_{l2:g}", {"lambda1": l1, "lambda2": l2}))
    return settings


SUMMARY_HEADER = ("setting", "lambda1", "lambda2", "theta", "steps", "final_total", "interference",
                  "degenerate_rows", "pruned_fraction", "skipped_short", "status")


def run_setting(config: TrainConfig, records, steps: int) -> tuple[list, dict]:
    trainer = Trainer(config, records)
    reports = [trainer.train_step() for _ in range(steps)]
    totals = [r.total for r in reports]
    counters: dict[str, int] = {}
    for r in reports:
        for k, v in r.counters.items():
            counters[k] = counters.get(k, 0) + v
    entries = counters.get("weight_entries", 0)
    summary = {
        "final_total": totals[-1] if totals else float("nan"),
        "interference": interference(totals),
        "degenerate_rows": counters.get("degenerate_rows", 0),
        "pruned_fraction": counters.get("pruned_residues", 0) / entries if entries else 0.0,
        "skipped_short": counters.get("skipped_short", 0),
    }
    return reports, summary


def cmd_ablate(args, run: Run) -> int:
    base = load_config(args.config, seed=args.seed, **({"lr": args.lr} if args.lr is not None else {}))
    run.manifest.config = base.to_dict()
    path = run.input(_resolve_input(args.input))
    records = load_corpus(path, strict=args.strict)
    settings = ablation_settings(_grid(args.lambda1_grid), _grid(args.theta_grid), _pairs(args.weights))
    if not settings:
        raise ValidationError("empty sweep: give --lambda1-grid, --theta-grid and/or --weights")
    rows, failures = [], 0
    for name, changes in settings:
        row = {"setting": name, "steps": args.steps, **{k: "" for k in SUMMARY_HEADER[5:]}}
        try:
            config = base.replace(**changes, allow_unconstrained=args.allow_unconstrained)
            row.update(lambda1=config.lambda1, lambda2=config.lambda2, theta=config.theta)
            config.loss_config()
            reports, summary = run_setting(config, records, args.steps)
            run.write(f"loss_{name}.csv", _loss_csv(reports))
            row.update(summary, status="ok")
            row["final_total"] = repr(summary["final_total"])
            row["interference"] = repr(summary["interference"])
            row["pruned_fraction"] = repr(summary["pruned_fraction"])
        except ProtclipError as exc:
            failures += 1
            row.update(lambda1=changes.get("lambda1", base.lambda1), lambda2=changes.get("lambda2", base.lambda2),
                       theta=changes.get("theta", base.theta), status=f"error:{type(exc).__name__}")
        print(f"{name:<22} {row['status']:<34} final {row['final_total']}  interference {row['interference']}")
        rows.append([row[h] for h in SUMMARY_HEADER])
    run.write("summary.csv", _csv(SUMMARY_HEADER, rows))
    return 2 if failures else 0


def cmd_replay(args, run: Run | None) -> int:
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {args.manifest}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.manifest} is not a run manifest: {exc}") from exc
    for path, digest in doc.get("inputs", {}).items():
        if sha256_file(path) != digest:
            raise ValidationError(f"input {path} changed since the recorded run")
    code = main([*doc["argv"], "--out", args.out])
    if code not in (0, 2) or not args.verify:
        return code
    replayed = json.loads((Path(args.out) / MANIFEST).read_text(encoding="utf-8"))
    if replayed["config"] != doc["config"]:
        raise InvariantBreach("replayed run resolved a different config")
    differing = sorted(k for k in doc["outputs"] if replayed["outputs"].get(k) != doc["outputs"][k])
    if differing:
        raise InvariantBreach("replay differs in: " + ", ".join(differing))
    print(f"replay identical: {len(doc['outputs'])} outputs")
    return code


# ------------------------------------------------------------------ parser


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--out", default="protclip_out", help="output directory")
    parser.add_argument("--strict", action="store_true", help="abort on the first malformed record")
    parser.add_argument("--allow-unconstrained", action="store_true",
                        help="permit loss weights with lambda1 + lambda2 != 1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protclip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"protclip {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    corpus_help = "JSON Lines corpus, or fixture:table1 / fixture:planted"

    p = sub.add_parser("curate", help="validate, filter and summarize a corpus")
    p.add_argument("input", help=corpus_help)

    p = sub.add_parser("stats", help="confidence and coverage marginals")
    p.add_argument("input", help=corpus_help)
    p.add_argument("--filtered", action="store_true", help="apply the pre-training filter first")

    p = sub.add_parser("sample", help="draw entry names with the cluster sampler")
    p.add_argument("input", help=corpus_help)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--exponent", type=float, default=-3.0)
    p.add_argument("--coverage-power", type=float, default=0.5)

    p = sub.add_parser("train", help="pre-train both encoders")
    p.add_argument("input", help=corpus_help)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--eval", action="store_true", help="report in-batch top-1 retrieval at the end")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.add_argument("--corrupt", action="append", default=[], metavar="OP",
                   help="scale the backward rule of OP (test hook; should make the check fail)")

    p = sub.add_parser("ablate", help="loss-weight and threshold sweeps")
    p.add_argument("input", help=corpus_help)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda1-grid", default=None, help="comma list; lambda2 = 1 - lambda1")
    p.add_argument("--theta-grid", default=None, help="comma list")
    p.add_argument("--weights", default=None, help="comma list of L1:L2 pairs")

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest")
    p.add_argument("--verify", action="store_true", help="fail unless outputs match the manifest")

    for action in sub.choices.values():
        _common(action)
    return parser


COMMANDS: dict[str, Callable] = {
    "curate": cmd_curate,
    "stats": cmd_stats,
    "sample": cmd_sample,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _strip_out(argv: list[str]) -> list[str]:
    out, skip = [], False
    for item in argv:
        if skip:
            skip = False
        elif item == "--out":
            skip = True
        elif not item.startswith("--out="):
            out.append(item)
    return out


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, InvariantBreach):
        return 3
    if isinstance(exc, (IoFailure, OSError)):
        return 1
    if isinstance(exc, ValidationError):
        return 2
    return 3


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args, None)
        run = Run(args, _strip_out(argv))
        code = COMMANDS[args.command](args, run)
        run.finish()
        return code
    except (ProtclipError, OSError) as exc:
        print(f"protclip {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
