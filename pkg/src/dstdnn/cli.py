"""Command-line entry point: ``dstdnn <command> [flags]``.

Every command accepts ``--config file.json``.  Its keys are flag names
(dashes or underscores) and explicit flags win over the file.  ``train``
additionally reads ``model`` and ``schedule`` sections from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainSchedule, load_json, preset
from .errors import DSTDNNError

log = logging.getLogger("dstdnn")

SECTIONS = {"train": ("model", "schedule")}


class UsageError(Exception):
    pass


def parse_lengths(text: str) -> list[int]:
    """``1024..65536`` (powers of two, inclusive) or a comma list."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError
            out, t = [], lo
            while t <= hi:
                out.append(t)
                t *= 2
            return out
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dstdnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, help="JSON file with default flag values")
        sp.add_argument("--seed", type=int, default=0)
        return sp

    g = cmd("gen-data", "write a synthetic speaker corpus")
    g.add_argument("--out", type=Path, default=Path("corpus"))
    g.add_argument("--speakers", type=int, default=20)
    g.add_argument("--utts", type=int, default=10)
    g.add_argument("--heldout", type=int, default=0, help="extra held-out utterances per speaker")
    g.add_argument("--min-duration", type=float, default=2.0)
    g.add_argument("--max-duration", type=float, default=4.0)
    g.add_argument("--clean", action="store_true", help="skip per-utterance session noise")

    t = cmd("train", "train a DS-TDNN on a corpus manifest")
    t.add_argument("--manifest", type=Path)
    t.add_argument("--out", type=Path, default=Path("run"))
    t.add_argument("--preset", default="toy")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--crops-per-utterance", type=int)
    t.add_argument("--threads", type=int, default=1)

    e = cmd("eval", "score a trial list and report EER / minDCF")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--trials", type=Path)
    e.add_argument("--manifest", type=Path, action="append",
                   help="manifest(s) locating trial utterances; default: CSV manifests next to the trials")
    e.add_argument("--cohort", type=Path, help="manifest whose speaker means form the as-norm cohort")
    e.add_argument("--cohort-size", type=int, default=600)
    e.add_argument("--out", type=Path, default=Path("eval"))

    a = cmd("analyze-filters", "classify the learned global filters of a checkpoint")
    a.add_argument("--checkpoint", type=Path)
    a.add_argument("--out", type=Path, default=Path("filters.json"))
    a.add_argument("--csv", type=Path, help="also write one row per filter")
    a.add_argument("--bins", type=int, default=10, help="center-frequency histogram bins")

    b = cmd("bench", "time FFT filtering against direct circular convolution")
    b.add_argument("--lengths", type=parse_lengths, default=parse_lengths("1024..65536"))
    b.add_argument("--channels", type=int, default=8)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--max-direct-length", type=int, default=8192)
    b.add_argument("--attention", action="store_true", help="also time attention-style mixing")
    b.add_argument("--threads", type=int, default=1, help="0 keeps torch's default thread count")
    b.add_argument("--out", type=Path, default=Path("bench.csv"))

    c = cmd("gradcheck", "compare autograd with central finite differences")
    c.add_argument("--preset", default="toy")
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--step", type=float, default=1e-4)
    c.add_argument("--rtol", type=float, default=1e-4)
    c.add_argument("--frames", type=int, default=40)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--out", type=Path, default=Path("gradcheck.json"))
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    args.sections = {}
    if args.config is None:
        return args
    cfg = load_json(args.config)
    if not isinstance(cfg, dict):
        raise UsageError(f"{args.config}: top level must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    defaults, sections = {}, {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if key in SECTIONS.get(args.command, ()):
            sections[key] = value
        elif dest in dests and dest not in ("config", "help"):
            defaults[dest] = value
        else:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for action in sub._actions:
        # string defaults from JSON bypass argparse's type conversion
        v = getattr(args, action.dest, None)
        if action.dest in defaults and isinstance(v, str) and action.type is not None:
            setattr(args, action.dest, action.type(v))
    args.sections = sections
    return args


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def cmd_gen_data(args) -> dict:
    from .frontend import SESSION_SNR_DB, generate_corpus

    paths = generate_corpus(args.out, args.speakers, args.utts, (args.min_duration, args.max_duration),
                            seed=args.seed, heldout_per_speaker=args.heldout,
                            session_snr_db=None if args.clean else SESSION_SNR_DB)
    return {k: str(v) for k, v in paths.items()}


def cmd_train(args) -> dict:
    from .training import train

    _require(args, "manifest")
    torch.set_num_threads(max(1, args.threads))
    model_over = dict(args.sections.get("model", {}))
    name = model_over.pop("preset", args.preset)
    cfg = preset(name, **model_over)
    sched = dict(args.sections.get("schedule", {}))
    for key in ("epochs", "batch_size", "lr_start", "lr_end", "warmup_steps", "crops_per_utterance"):
        if getattr(args, key) is not None:
            sched[key] = getattr(args, key)
    schedule = TrainSchedule.from_dict(sched)
    res = train(args.manifest, cfg, schedule, seed=args.seed, out_dir=args.out)
    return {"checkpoint": str(res.checkpoint), "final": res.metrics[-1] if res.metrics else None}


def _manifest_rows(paths: Sequence[Path]) -> dict[str, dict]:
    from .frontend import MANIFEST_FIELDS, read_manifest

    rows = {}
    for p in paths:
        with p.open(encoding="utf-8") as fh:
            if tuple(fh.readline().strip().split(",")) != MANIFEST_FIELDS:
                continue
        for r in read_manifest(p):
            rows[r["utt_id"]] = r
    return rows


def cmd_eval(args) -> dict:
    from .backend import write_metrics
    from .checkpoint import load_model
    from .frontend import read_manifest, read_trials
    from .pipeline import embed_utterances, evaluate_trials

    _require(args, "checkpoint", "trials")
    model, _, _ = load_model(args.checkpoint)
    trials = read_trials(args.trials)
    manifests = args.manifest or sorted(p for p in args.trials.parent.glob("*.csv") if p != args.trials)
    rows = _manifest_rows(manifests)
    needed = list(dict.fromkeys(u for t in trials for u in t[:2]))
    missing = [u for u in needed if u not in rows]
    if missing:
        raise UsageError(f"{len(missing)} trial utterances are in no manifest, e.g. {missing[0]!r}")
    store = embed_utterances(model, [rows[u] for u in needed])
    cohort = None
    if args.cohort is not None:
        cohort = embed_utterances(model, read_manifest(args.cohort))
    scores, result = evaluate_trials(store, trials, cohort, args.cohort_size)
    args.out.mkdir(parents=True, exist_ok=True)
    scores.to_csv(args.out / "scores.csv")
    m = dict(result["as_norm" if cohort is not None else "raw"])
    m["raw"] = result["raw"]
    if cohort is not None:
        m["as_norm"] = result["as_norm"]
    write_metrics(args.out / "metrics.json", m)
    return {"eer": m["eer"], "min_dcf": m["min_dcf"], "out": str(args.out)}


def cmd_analyze_filters(args) -> dict:
    from .filters import analyze_filters

    _require(args, "checkpoint")
    report = analyze_filters(args.checkpoint, n_hist=args.bins)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(args.out)
    if args.csv is not None:
        report.write_csv(args.csv)
    return {"class_counts": report.class_counts, "out": str(args.out)}


def cmd_bench(args) -> dict:
    from .bench import bench_scaling, write_records

    records, slopes = bench_scaling(args.lengths, args.channels, args.reps,
                                    include_attention=args.attention,
                                    max_direct_length=args.max_direct_length,
                                    threads=args.threads or None, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_records(args.out, records)
    return {"slopes": slopes, "out": str(args.out)}


def cmd_gradcheck(args) -> dict:
    from .network import DSTDNN
    from .training import AAMHead, finite_diff_check

    torch.manual_seed(args.seed)
    cfg = preset(args.preset, filter_frames=args.frames)
    model = DSTDNN(cfg)
    head = AAMHead(3, cfg.embedding_dim)
    gen = torch.Generator().manual_seed(args.seed)
    x = torch.randn(args.batch, cfg.n_mels, args.frames, generator=gen)
    labels = torch.arange(args.batch) % 3
    report = finite_diff_check(model, head, x, labels, n_samples=args.samples, h=args.step,
                               rtol=args.rtol, seed=args.seed)
    summary = report.summary()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    if report.failures:
        raise DSTDNNError(f"{len(report.failures)} of {len(report.entries)} gradient samples "
                          f"exceed rtol {args.rtol}; see {args.out}")
    return summary


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "analyze-filters": cmd_analyze_filters, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        np.random.seed(args.seed)
        out = COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (UsageError, DSTDNNError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"dstdnn {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (UsageError, ValueError, KeyError)) else 1
    print(json.dumps(out, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
