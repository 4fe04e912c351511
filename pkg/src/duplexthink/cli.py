"""Command-line entry point.

Subcommands: gen (corpora), train (one pipeline stage), eval (metrics +
figures), export (embedding CSV + projection figure), replay (render one
dialogue), serve (live WebSocket sessions).

Exit codes: 0 success, 2 usage, 3 data error, 4 model/checkpoint error,
5 runtime failure. Every command prints the resolved config hash so runs
are attributable to an exact configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import evalsuite, figures, training
from .config import (
    UsageError,
    config_hash,
    gen_config_from,
    load_config,
    model_config_from,
    stage_config_from,
    vocabs_from,
)
from .corpus import DataError
from .engine import run_dialogue
from .model import CheckpointError, load_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CKPT = 4
EXIT_RUNTIME = 5


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path config override")
    p.add_argument("--log", help="JSON-lines event log path")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duplexthink",
                                description="full-duplex latent-reasoning dialogue agent")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dialogue corpus")
    _add_config_args(g)
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("qa", "continuation"), default="qa")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="run one training stage")
    _add_config_args(t)
    t.add_argument("--stage", choices=training.STAGES, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--in-ckpt")
    t.add_argument("--out-ckpt", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally paired")
    _add_config_args(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--baseline-ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--no-figures", action="store_true")

    x = sub.add_parser("export", help="export per-frame embeddings to CSV")
    _add_config_args(x)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--limit", type=int, default=300)
    x.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("replay", help="stream one stored record through the engine")
    _add_config_args(r)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--record", required=True, help="corpus JSONL file")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--json", action="store_true", dest="as_json")

    s = sub.add_parser("serve", help="run the live WebSocket session service")
    _add_config_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bind", default="127.0.0.1:8731")
    s.add_argument("--frame-ms", type=float, default=None)
    return p


class _EventLog:
    def __init__(self, path: str | None):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, **kv) -> None:
        if self.fh:
            self.fh.write(json.dumps(kv) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def cmd_gen(args, cfg, log) -> int:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    gen_cfg = gen_config_from(cfg)
    if args.seed is not None:
        gen_cfg.seed = args.seed
    vocabs = vocabs_from(cfg)
    if args.kind == "qa":
        records = corpus_mod.gen_qa_corpus(gen_cfg, vocabs, args.n)
    else:
        records = corpus_mod.gen_continuation_corpus(gen_cfg, vocabs, args.n)
    corpus_mod.write_jsonl(records, args.out, vocabs)
    n_interrupted = sum(1 for r in records if r.events.interruption_onset is not None)
    n_noise = sum(1 for r in records if r.snr_db is not None)
    mean_len = sum(len(r) for r in records) / len(records)
    print(f"wrote {len(records)} {args.kind} records to {args.out}")
    print(f"interruption rate {n_interrupted / len(records):.3f}  "
          f"noise rate {n_noise / len(records):.3f}  mean length {mean_len:.1f} frames")
    log.write(event="gen", n=len(records), kind=args.kind, out=args.out,
              interrupted=n_interrupted, noise=n_noise, mean_len=mean_len)
    return 0


def cmd_train(args, cfg, log) -> int:
    stage = stage_config_from(cfg, args.stage)
    model_cfg = model_config_from(cfg)
    result = training.run_stage(
        args.data, stage, model_cfg=model_cfg,
        in_ckpt=args.in_ckpt, out_ckpt=args.out_ckpt, log_path=args.log,
    )
    last = result.rows[-1]
    print(f"stage {args.stage}: {stage.steps} steps in {result.wall_seconds:.1f}s; "
          f"final elbo {last['elbo']:.4f} (reco {last['reco']:.4f})")
    print(f"checkpoint written to {args.out_ckpt}")
    if args.log:
        fig = figures.save_training_curves(result.rows, os.path.splitext(args.log)[0] + ".png")
        print(f"loss curves: {fig}")
    return 0


def cmd_eval(args, cfg, log) -> int:
    params = load_checkpoint(args.ckpt)
    baseline = load_checkpoint(args.baseline_ckpt) if args.baseline_ckpt else None
    records = corpus_mod.read_jsonl(args.data, params.config.vocabs())
    report = evalsuite.evaluate(
        params, records, baseline_params=baseline,
        turn_window=cfg["eval"]["turn_window"],
        barge_window=cfg["eval"]["barge_window"],
        batch_size=cfg["eval"]["batch_size"],
    )
    evalsuite.write_report(report, args.report)
    _print_report_table(report)
    log.write(event="eval", report=args.report)
    if not args.no_figures:
        out_dir = os.path.dirname(os.path.abspath(args.report)) or "."
        for p in figures.save_eval_figures(report, out_dir):
            print(f"figure: {p}")
    print(f"report written to {args.report}")
    return 0


def _fmt(x, nd=3) -> str:
    return "-" if x is None else f"{x:.{nd}f}"


def _print_report_table(report: dict) -> None:
    names = [k for k in ("latent", "baseline") if k in report]
    print(f"{'metric':<28}" + "".join(f"{n:>12}" for n in names))
    rows = [
        ("dialog accuracy", lambda r: r["accuracy"]),
        ("round accuracy", lambda r: r["round_accuracy"]),
        ("TOR", lambda r: r["tor"]),
        ("turn latency median (fr)", lambda r: r["turn_taking"]["latency_median_frames"]),
        ("turn latency median (s)", lambda r: r["turn_taking"]["latency_median_s"]),
        ("barge-in success", lambda r: r["barge_in"]["success_rate"]),
        ("barge-in latency med (fr)", lambda r: r["barge_in"]["latency_median_frames"]),
    ]
    for label, pick in rows:
        print(f"{label:<28}" + "".join(f"{_fmt(pick(report[n])):>12}" for n in names))
    if "delta" in report:
        print(f"{'accuracy delta':<28}{report['delta']['accuracy']:>+12.3f}")


def cmd_export(args, cfg, log) -> int:
    params = load_checkpoint(args.ckpt)
    records = corpus_mod.read_jsonl(args.data, params.config.vocabs())
    if args.limit > 0:
        records = records[: args.limit]
    n = evalsuite.export_embeddings(params, records, args.out,
                                    batch_size=cfg["eval"]["batch_size"])
    print(f"wrote {n} embedding rows for {len(records)} dialogues to {args.out}")
    log.write(event="export", rows=n, out=args.out)
    if not args.no_figures:
        fig = figures.save_embedding_projection(args.out, os.path.splitext(args.out)[0] + ".png")
        print(f"projection figure: {fig}")
    return 0


_SPARK = "▁▂▃▄▅▆▇█"


def cmd_replay(args, cfg, log) -> int:
    params = load_checkpoint(args.ckpt)
    vocabs = params.config.vocabs()
    records = corpus_mod.read_jsonl(args.record, vocabs)
    if not 0 <= args.index < len(records):
        raise DataError(f"record index {args.index} out of range [0, {len(records)})")
    record = records[args.index]
    trace = run_dialogue(params, record.user)
    if args.as_json:
        print(json.dumps({
            "user": [vocabs.audio.surface(u) for u in trace.user],
            "agent": [vocabs.text.surface(a) for a in trace.agent],
            "g": [round(v, 4) for v in trace.ghat],
            "phase": trace.phase,
        }))
        return 0
    width = 14
    cell = lambda s: f"{s:>{width // 2}.{width // 2}}"
    for lo in range(0, len(trace), 10):
        hi = min(lo + 10, len(trace))
        frames = range(lo, hi)
        print("frame " + "".join(cell(str(t)) for t in frames))
        print("user  " + "".join(cell(vocabs.audio.surface(trace.user[t])) for t in frames))
        print("agent " + "".join(cell(vocabs.text.surface(trace.agent[t])) for t in frames))
        print("ghat  " + "".join(cell(_SPARK[min(int(trace.ghat[t] * len(_SPARK)), len(_SPARK) - 1)])
                                 for t in frames))
        print()
    print(f"{len(trace)} frames; expected answers: "
          + "; ".join(" ".join(vocabs.text.surface(t) for t in r.answer)
                      for r in record.events.rounds))
    return 0


def cmd_serve(args, cfg, log) -> int:
    from .server import serve  # lazy: pulls in websockets

    params = load_checkpoint(args.ckpt)
    frame_ms = args.frame_ms if args.frame_ms is not None else cfg["engine"]["frame_ms"]
    print(f"serving {args.ckpt} on {args.bind} at {frame_ms:.0f} ms/frame")
    try:
        serve(params, bind=args.bind, frame_ms=frame_ms)
    except OSError as exc:
        raise RuntimeError(f"cannot bind {args.bind}: {exc}") from exc
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "replay": cmd_replay,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = _EventLog(getattr(args, "log", None))
    try:
        cfg = load_config(args.config, args.overrides)
        print(f"config hash {config_hash(cfg)}")
        log.write(event="config", hash=config_hash(cfg), command=args.command)
        return _COMMANDS[args.command](args, cfg, log)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except (FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
