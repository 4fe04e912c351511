"""Conversational metrics over (trace, record) pairs, A/B evaluation, and
embedding export for external projection.

All metrics are pure functions of the trace and its paired record, measured
in frames; second-valued figures use the 12.5 Hz frame rate throughout.
Per-task accuracy is scored per round (a dialogue is correct only if every
round is), turn-taking latency is the gap from a query's end to the first
<BOS> inside the response window, and barge-in latency is the gap from the
interruption onset to the yielding <EOS>.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .engine import PHASE_LISTENING, EventTrace, run_dialogues
from .model import ModelParams
from .stream import DuplexRecord
from .vocab import TextVocab

FRAME_RATE_HZ = 12.5
DEFAULT_TURN_WINDOW = 40  # frames an answer may take before the round counts as missed
DEFAULT_BARGE_WINDOW = 25  # frames a yield may take before the barge-in counts as failed

_CONTROL_IDS = (TextVocab.SIL_ID, TextVocab.BOS_ID, TextVocab.EOS_ID, TextVocab.PAD_ID)


def frames_to_seconds(frames: float) -> float:
    return frames / FRAME_RATE_HZ


@dataclass
class MetricsReport:
    n_dialogues: int = 0
    n_rounds: int = 0
    accuracy: float = 0.0  # fraction of dialogues with every round correct
    round_accuracy: float = 0.0
    per_task_accuracy: dict[str, float] = field(default_factory=dict)
    tor: float = 0.0
    turn_latency_mean_frames: float | None = None
    turn_latency_median_frames: float | None = None
    turn_latency_mean_s: float | None = None
    turn_latency_median_s: float | None = None
    turn_latencies: list[int] = field(default_factory=list)
    n_barge_in: int = 0
    barge_in_success_rate: float | None = None
    barge_in_latency_mean_frames: float | None = None
    barge_in_latency_median_frames: float | None = None
    barge_in_latency_mean_s: float | None = None
    barge_in_latencies: list[int] = field(default_factory=list)
    anomalies: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_dialogues": self.n_dialogues,
            "n_rounds": self.n_rounds,
            "accuracy": self.accuracy,
            "round_accuracy": self.round_accuracy,
            "per_task_accuracy": self.per_task_accuracy,
            "tor": self.tor,
            "turn_taking": {
                "latency_mean_frames": self.turn_latency_mean_frames,
                "latency_median_frames": self.turn_latency_median_frames,
                "latency_mean_s": self.turn_latency_mean_s,
                "latency_median_s": self.turn_latency_median_s,
                "latencies_frames": self.turn_latencies,
            },
            "barge_in": {
                "n": self.n_barge_in,
                "success_rate": self.barge_in_success_rate,
                "latency_mean_frames": self.barge_in_latency_mean_frames,
                "latency_median_frames": self.barge_in_latency_median_frames,
                "latency_mean_s": self.barge_in_latency_mean_s,
                "latencies_frames": self.barge_in_latencies,
            },
            "anomalies": self.anomalies,
        }


def _round_bounds(record: DuplexRecord, i: int, trace_len: int) -> tuple[int, int]:
    """Frames inside which round i's response must appear: after its query
    ends and before the next round's query starts."""
    rounds = record.events.rounds
    start = rounds[i].query_end + 1
    end = rounds[i + 1].query_start if i + 1 < len(rounds) else trace_len
    return start, end


def response_accuracy(trace: EventTrace, record: DuplexRecord) -> dict:
    """Exact-match scoring of every round's answer.

    The answer is the run of content tokens between the round's first <BOS>
    and the first <PAD>/<EOS> after it. Order matters; a round with no <BOS>
    in bounds is wrong and flagged no_response.
    """
    if not record.events.rounds:
        raise ValueError("response_accuracy: record carries no rounds")
    if len(trace) != len(record):
        raise ValueError(
            f"response_accuracy: trace length {len(trace)} != record length {len(record)}"
        )
    rounds = record.events.rounds
    outcomes = []
    anomalies: dict[str, int] = {}
    for i, rnd in enumerate(rounds):
        lo, hi = _round_bounds(record, i, len(trace))
        bos = next((t for t in range(lo, hi) if trace.agent[t] == TextVocab.BOS_ID), None)
        if bos is None:
            anomalies["no_response"] = anomalies.get("no_response", 0) + 1
            outcomes.append({"task": rnd.task, "correct": False, "extracted": None})
            continue
        extracted: list[int] = []
        for t in range(bos + 1, len(trace)):
            tok = trace.agent[t]
            if tok in (TextVocab.PAD_ID, TextVocab.EOS_ID):
                break
            if tok == TextVocab.SIL_ID or tok == TextVocab.BOS_ID:
                break  # malformed turn; score what was collected
            extracted.append(tok)
        outcomes.append({
            "task": rnd.task,
            "correct": extracted == rnd.answer,
            "extracted": extracted,
        })
    return {
        "correct": all(o["correct"] for o in outcomes),
        "rounds": outcomes,
        "anomalies": anomalies,
    }


def turn_taking(
    trace: EventTrace,
    record: DuplexRecord,
    window: int = DEFAULT_TURN_WINDOW,
) -> dict:
    """Per-round turn-taking latency and takeover bookkeeping.

    A round is taken when a <BOS> lands within `window` frames after its
    query end; a <BOS> during the query itself is a premature_turn anomaly
    and does not count as taking the turn.
    """
    rounds = record.events.rounds
    per_round = []
    anomalies: dict[str, int] = {}
    for i, rnd in enumerate(rounds):
        lo, hi = _round_bounds(record, i, len(trace))
        premature = any(
            trace.agent[t] == TextVocab.BOS_ID
            for t in range(rnd.query_start, min(rnd.query_end + 1, len(trace)))
        )
        if premature:
            anomalies["premature_turn"] = anomalies.get("premature_turn", 0) + 1
        search_hi = min(rnd.query_end + window + 1, hi)
        bos = next(
            (t for t in range(lo, search_hi) if trace.agent[t] == TextVocab.BOS_ID), None
        )
        per_round.append({
            "taken": bos is not None,
            "latency": None if bos is None else bos - rnd.query_end,
            "premature": premature,
        })
    taken = [r for r in per_round if r["taken"]]
    return {
        "rounds": per_round,
        "tor": len(taken) / len(per_round) if per_round else 0.0,
        "latencies": [r["latency"] for r in taken],
        "anomalies": anomalies,
    }


def barge_in(
    trace: EventTrace,
    record: DuplexRecord,
    window: int = DEFAULT_BARGE_WINDOW,
) -> dict:
    """Latency from interruption onset to the yielding <EOS>; success when it
    arrives within `window` frames (inclusive)."""
    onset = record.events.interruption_onset
    if onset is None:
        raise ValueError("barge_in: record has no interruption onset")
    eos = next((t for t in range(onset, len(trace)) if trace.agent[t] == TextVocab.EOS_ID), None)
    latency = None if eos is None else eos - onset
    return {
        "onset": onset,
        "latency": latency,
        "success": latency is not None and latency <= window,
    }


def trace_anomalies(trace: EventTrace) -> dict[str, int]:
    """Control-token misfires: non-<BOS> control emissions while listening,
    and nested <BOS> while already speaking."""
    counts: dict[str, int] = {}
    speaking = False
    for tok in trace.agent:
        if tok == TextVocab.BOS_ID:
            if speaking:
                counts["nested_bos"] = counts.get("nested_bos", 0) + 1
            speaking = True
        elif tok == TextVocab.EOS_ID:
            if not speaking:
                counts["unexpected_control"] = counts.get("unexpected_control", 0) + 1
            speaking = False
        elif tok == TextVocab.PAD_ID and not speaking:
            counts["unexpected_control"] = counts.get("unexpected_control", 0) + 1
    return counts


def _merge_counts(total: dict[str, int], extra: dict[str, int]) -> None:
    for k, v in extra.items():
        total[k] = total.get(k, 0) + v


def evaluate(
    params: ModelParams,
    records: list[DuplexRecord],
    baseline_params: ModelParams | None = None,
    turn_window: int = DEFAULT_TURN_WINDOW,
    barge_window: int = DEFAULT_BARGE_WINDOW,
    batch_size: int = 64,
) -> dict:
    """Run every record's user channel through the engine and aggregate all
    metrics. With baseline params a paired report with deltas is produced."""
    if not records:
        raise ValueError("evaluate: empty test set")
    report = _evaluate_single(params, records, turn_window, barge_window, batch_size)
    if baseline_params is None:
        return {"latent": report.to_dict()}
    base = _evaluate_single(baseline_params, records, turn_window, barge_window, batch_size)
    delta_tasks = {
        task: report.per_task_accuracy.get(task, 0.0) - base.per_task_accuracy.get(task, 0.0)
        for task in sorted(set(report.per_task_accuracy) | set(base.per_task_accuracy))
    }
    return {
        "latent": report.to_dict(),
        "baseline": base.to_dict(),
        "delta": {
            "accuracy": report.accuracy - base.accuracy,
            "round_accuracy": report.round_accuracy - base.round_accuracy,
            "per_task_accuracy": delta_tasks,
            "tor": report.tor - base.tor,
        },
    }


def _evaluate_single(
    params: ModelParams,
    records: list[DuplexRecord],
    turn_window: int,
    barge_window: int,
    batch_size: int,
) -> MetricsReport:
    report = MetricsReport(n_dialogues=len(records))
    correct_dialogues = 0
    round_hits: list[bool] = []
    task_hits: dict[str, list[bool]] = {}
    turn_latencies: list[int] = []
    rounds_total = 0
    rounds_taken = 0
    barge_lat: list[int] = []
    barge_success = 0
    n_barge = 0
    anomalies: dict[str, int] = {}

    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        traces = run_dialogues(params, [r.user for r in chunk])
        for trace, record in zip(traces, chunk):
            _merge_counts(anomalies, trace_anomalies(trace))
            if record.events.rounds:
                acc = response_accuracy(trace, record)
                _merge_counts(anomalies, acc["anomalies"])
                if acc["correct"]:
                    correct_dialogues += 1
                for o in acc["rounds"]:
                    round_hits.append(o["correct"])
                    task_hits.setdefault(o["task"], []).append(o["correct"])
                tt = turn_taking(trace, record, turn_window)
                _merge_counts(anomalies, tt["anomalies"])
                rounds_total += len(tt["rounds"])
                rounds_taken += sum(1 for r in tt["rounds"] if r["taken"])
                turn_latencies.extend(tt["latencies"])
            if record.events.interruption_onset is not None:
                b = barge_in(trace, record, barge_window)
                n_barge += 1
                if b["success"]:
                    barge_success += 1
                if b["latency"] is not None:
                    barge_lat.append(b["latency"])

    report.accuracy = correct_dialogues / len(records)
    report.n_rounds = rounds_total
    report.round_accuracy = float(np.mean(round_hits)) if round_hits else 0.0
    report.per_task_accuracy = {t: float(np.mean(h)) for t, h in sorted(task_hits.items())}
    report.tor = rounds_taken / rounds_total if rounds_total else 0.0
    if turn_latencies:
        report.turn_latencies = turn_latencies
        report.turn_latency_mean_frames = float(np.mean(turn_latencies))
        report.turn_latency_median_frames = float(np.median(turn_latencies))
        report.turn_latency_mean_s = frames_to_seconds(report.turn_latency_mean_frames)
        report.turn_latency_median_s = frames_to_seconds(report.turn_latency_median_frames)
    report.n_barge_in = n_barge
    if n_barge:
        report.barge_in_success_rate = barge_success / n_barge
        if barge_lat:
            report.barge_in_latencies = barge_lat
            report.barge_in_latency_mean_frames = float(np.mean(barge_lat))
            report.barge_in_latency_median_frames = float(np.median(barge_lat))
            report.barge_in_latency_mean_s = frames_to_seconds(report.barge_in_latency_mean_frames)
    report.anomalies = anomalies
    return report


def write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)


def export_embeddings(
    params: ModelParams,
    records: list[DuplexRecord],
    out_path: str,
    batch_size: int = 64,
) -> int:
    """CSV of per-frame embeddings for external projection.

    Three row kinds per dialogue: `audio` (the encoder output X_t at every
    frame), `latent` (the carried mixture produced at each listening frame),
    and `target_text` (embedding-table rows of the expected answer tokens;
    their frame column is the token's index within the response). Returns the
    number of data rows written.
    """
    d = params.config.d_model
    embed = params.raw()["text_embed"]
    header = ["dialogue", "frame", "kind"] + [f"e{j}" for j in range(d)]
    rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            traces = run_dialogues(params, [r.user for r in chunk], capture=True)
            for i, (trace, record) in enumerate(zip(traces, chunk)):
                did = lo + i
                for t, x in enumerate(trace.audio_embeds):
                    writer.writerow([did, t, "audio"] + [f"{v:.6g}" for v in x])
                    rows += 1
                for t, z in trace.latent_embeds:
                    writer.writerow([did, t, "latent"] + [f"{v:.6g}" for v in z])
                    rows += 1
                for rnd in record.events.rounds:
                    for k, tok in enumerate(rnd.answer):
                        writer.writerow([did, k, "target_text"] + [f"{v:.6g}" for v in embed[tok]])
                        rows += 1
    return rows
