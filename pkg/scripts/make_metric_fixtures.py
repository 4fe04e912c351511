"""Build the shipped metric fixture set: 20 hand-constructed (trace, record)
pairs whose metric values are written down by hand next to the construction.

Run from the repository root:  python3 scripts/make_metric_fixtures.py
"""

from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from duplexthink.corpus import record_to_json
from duplexthink.stream import DuplexRecord, Events, RoundEvent
from duplexthink.vocab import build_vocabs

V = build_vocabs()
TV, AV = V.text, V.audio
SIL, BOS, EOS, PAD = TV.SIL_ID, TV.BOS_ID, TV.EOS_ID, TV.PAD_ID
USIL = AV.USIL_ID


def d(i):
    return TV.digit_id(i)


def a(i):
    return AV.digit_id(i)


def agent_channel(T, turns):
    """turns: list of (bos_frame, token list starting after BOS, eos_frame)."""
    ch = [SIL] * T
    for bos, body, eos in turns:
        ch[bos] = BOS
        for k, tok in enumerate(body):
            ch[bos + 1 + k] = tok
        ch[eos] = EOS
    return ch


def user_query(T, q_start, digits, task="sum"):
    ch = [USIL] * T
    ch[q_start] = AV.marker_id(task)
    for k, dg in enumerate(digits):
        ch[q_start + 1 + k] = a(dg)
    ch[q_start + 1 + len(digits)] = AV.query_end_id
    return ch, q_start + 1 + len(digits)  # q_end frame


def g_from_agent(ch):
    g = [0] * len(ch)
    speaking = False
    for i, t in enumerate(ch):
        if t == BOS:
            speaking = True
        if speaking:
            g[i] = 1
        if t == EOS:
            speaking = False
    return g


def ghat_from_agent(ch):
    return [0.9 if t != SIL else 0.05 for t in ch]


def phase_from_agent(ch):
    out = []
    speaking = False
    for t in ch:
        if t == BOS:
            speaking = True
        out.append("SPEAKING" if speaking else "LISTENING")
        if t == EOS:
            speaking = False
    return out


def make(name, T, rounds, label_turns, trace_turns, onset=None, expected=None,
         trace_extra=None, task="sum"):
    user = [USIL] * T
    q_ends = []
    for r in rounds:
        ch, q_end = user_query(T, r["q_start"], r["digits"], r.get("task", task))
        for i, s in enumerate(ch):
            if s != USIL:
                user[i] = s
        q_ends.append(q_end)
        assert q_end == r["q_end"], (name, q_end, r["q_end"])
    record_agent = agent_channel(T, label_turns)
    events = Events(
        rounds=[RoundEvent(r["q_start"], r["q_end"], r.get("task", task), [d(x) for x in r["answer"]])
                for r in rounds],
        turns=[(b, e) for b, _, e in label_turns],
        interruption_onset=onset,
        interrupted_turn=0 if onset is not None else None,
    )
    record = DuplexRecord(user=user, agent=record_agent, g=g_from_agent(record_agent),
                          events=events, seed=0, kind="qa")
    trace_agent = agent_channel(T, trace_turns)
    if trace_extra:
        for frame, tok in trace_extra:
            trace_agent[frame] = tok
    return {
        "name": name,
        "record": record_to_json(record, V),
        "trace": {
            "agent": [TV.surface(t) for t in trace_agent],
            "ghat": ghat_from_agent(trace_agent),
            "phase": phase_from_agent(trace_agent),
        },
        "expected": expected,
    }


fixtures = []

# F01 basic correct answer, latency 2 frames = 0.16 s
fixtures.append(make(
    "basic_correct", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0)], 8)],
    trace_turns=[(6, [d(0)], 8)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "latency_seconds": [0.16], "anomalies": {}},
))

# F02 pads after the answer do not affect extraction
fixtures.append(make(
    "pads_after_answer", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0), PAD, PAD], 10)],
    trace_turns=[(6, [d(0), PAD, PAD], 10)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "anomalies": {}},
))

# F03 fully silent agent: no_response
fixtures.append(make(
    "all_silent", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0)], 8)],
    trace_turns=[],
    expected={"correct": False, "round_correct": [False], "tor": 0.0,
              "latencies": [], "anomalies": {"no_response": 1}},
))

# F04 response beyond the 40-frame window: correct content, turn not taken
fixtures.append(make(
    "late_beyond_window", 50,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)], 7)],
    trace_turns=[(45, [d(5)], 47)],  # q_end+42
    expected={"correct": True, "round_correct": [True], "tor": 0.0,
              "latencies": [], "anomalies": {}},
))

# F05 premature turn during the query
fixtures.append(make(
    "premature_turn", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0)], 8)],
    trace_turns=[(3, [d(0)], 5)],
    expected={"correct": False, "round_correct": [False], "tor": 0.0,
              "latencies": [], "anomalies": {"premature_turn": 1, "no_response": 1}},
))

# F06 wrong token order is wrong
fixtures.append(make(
    "order_matters", 20,
    rounds=[{"q_start": 1, "digits": [1, 3], "q_end": 4, "answer": [1, 3], "task": "copy"}],
    label_turns=[(6, [d(1), d(3)], 9)],
    trace_turns=[(6, [d(3), d(1)], 9)],
    expected={"correct": False, "round_correct": [False], "tor": 1.0,
              "latencies": [2], "anomalies": {}},
))

# F07 two rounds, both correct, latencies 2 and 3
fixtures.append(make(
    "two_rounds_correct", 35,
    rounds=[{"q_start": 1, "digits": [2], "q_end": 3, "answer": [2], "task": "copy"},
            {"q_start": 21, "digits": [7], "q_end": 23, "answer": [7], "task": "copy"}],
    label_turns=[(5, [d(2)], 7), (26, [d(7)], 28)],
    trace_turns=[(5, [d(2)], 7), (26, [d(7)], 28)],
    expected={"correct": True, "round_correct": [True, True], "tor": 1.0,
              "latencies": [2, 3], "anomalies": {}},
))

# F08 two rounds, second wrong: dialogue incorrect
fixtures.append(make(
    "two_rounds_one_wrong", 35,
    rounds=[{"q_start": 1, "digits": [2], "q_end": 3, "answer": [2], "task": "copy"},
            {"q_start": 21, "digits": [7], "q_end": 23, "answer": [7], "task": "copy"}],
    label_turns=[(5, [d(2)], 7), (26, [d(7)], 28)],
    trace_turns=[(5, [d(2)], 7), (26, [d(8)], 28)],
    expected={"correct": False, "round_correct": [True, False], "tor": 1.0,
              "latencies": [2, 3], "anomalies": {}},
))

# F09 barge-in: onset 30, EOS at 38 -> latency 8, success
fixtures.append(make(
    "barge_in_8", 70,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)] + [PAD] * 55, 61)],
    trace_turns=[(5, [d(5)] + [PAD] * 31, 38)],
    onset=30,
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge": {"latency": 8, "success": True},
              "anomalies": {}},
))

# F10 barge-in at exactly the window edge (25) is a success
fixtures.append(make(
    "barge_in_boundary", 70,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)] + [PAD] * 55, 61)],
    trace_turns=[(5, [d(5)] + [PAD] * 48, 55)],
    onset=30,
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge": {"latency": 25, "success": True},
              "anomalies": {}},
))

# F11 one frame past the window: failure
fixtures.append(make(
    "barge_in_late", 70,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)] + [PAD] * 55, 61)],
    trace_turns=[(5, [d(5)] + [PAD] * 49, 56)],
    onset=30,
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge": {"latency": 26, "success": False},
              "anomalies": {}},
))

# F12 no EOS after onset at all: failure with no latency
fixtures.append(make(
    "barge_in_never_yields", 70,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)] + [PAD] * 55, 61)],
    trace_turns=[],
    onset=30,
    trace_extra=[(5, BOS), (6, d(5))] + [(i, PAD) for i in range(7, 70)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge": {"latency": None, "success": False},
              "anomalies": {}},
))

# F13 record without an onset: barge_in is a usage error
fixtures.append(make(
    "barge_in_requires_onset", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0)], 8)],
    trace_turns=[(6, [d(0)], 8)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge_error": True, "anomalies": {}},
))

# F14 silence with high-confidence gate still counts as no_response
fixtures.append(make(
    "silent_high_gate", 20,
    rounds=[{"q_start": 1, "digits": [3, 7], "q_end": 4, "answer": [0]}],
    label_turns=[(6, [d(0)], 8)],
    trace_turns=[],
    expected={"correct": False, "round_correct": [False], "tor": 0.0,
              "latencies": [], "anomalies": {"no_response": 1}},
))

# F15 stray <PAD> while listening is an unexpected_control anomaly
fixtures.append(make(
    "stray_pad", 25,
    rounds=[{"q_start": 3, "digits": [3, 7], "q_end": 6, "answer": [0]}],
    label_turns=[(8, [d(0)], 10)],
    trace_turns=[(8, [d(0)], 10)],
    trace_extra=[(1, PAD)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "anomalies": {"unexpected_control": 1}},
))

# F16 two rounds, only the first taken: TOR 0.5
fixtures.append(make(
    "half_taken", 35,
    rounds=[{"q_start": 1, "digits": [2], "q_end": 3, "answer": [2], "task": "copy"},
            {"q_start": 21, "digits": [7], "q_end": 23, "answer": [7], "task": "copy"}],
    label_turns=[(4, [d(2)], 6), (26, [d(7)], 28)],
    trace_turns=[(4, [d(2)], 6)],
    expected={"correct": False, "round_correct": [True, False], "tor": 0.5,
              "latencies": [1], "anomalies": {"no_response": 1}},
))

# F17 three rounds with latencies 1, 2, 6: mean 3, median 2
fixtures.append(make(
    "latency_spread", 60,
    rounds=[{"q_start": 1, "digits": [2], "q_end": 3, "answer": [2], "task": "copy"},
            {"q_start": 21, "digits": [7], "q_end": 23, "answer": [7], "task": "copy"},
            {"q_start": 41, "digits": [9], "q_end": 43, "answer": [9], "task": "copy"}],
    label_turns=[(4, [d(2)], 6), (25, [d(7)], 27), (49, [d(9)], 51)],
    trace_turns=[(4, [d(2)], 6), (25, [d(7)], 27), (49, [d(9)], 51)],
    expected={"correct": True, "round_correct": [True, True, True], "tor": 1.0,
              "latencies": [1, 2, 6], "latency_mean": 3.0, "latency_median": 2.0,
              "anomalies": {}},
))

# F18 minimal turn [BOS, token, EOS]
fixtures.append(make(
    "minimal_turn", 15,
    rounds=[{"q_start": 1, "digits": [4], "q_end": 3, "answer": [4], "task": "copy"}],
    label_turns=[(5, [d(4)], 7)],
    trace_turns=[(5, [d(4)], 7)],
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "anomalies": {}},
))

# F19 nested <BOS> corrupts extraction and is flagged
fixtures.append(make(
    "nested_bos", 20,
    rounds=[{"q_start": 1, "digits": [1], "q_end": 3, "answer": [1], "task": "copy"}],
    label_turns=[(6, [d(1)], 8)],
    trace_turns=[],
    trace_extra=[(6, BOS), (7, BOS), (8, d(1)), (9, EOS)],
    expected={"correct": False, "round_correct": [False], "tor": 1.0,
              "latencies": [3], "anomalies": {"nested_bos": 1}},
))

# F20 barge-in latency 10: success well inside the window
fixtures.append(make(
    "barge_in_10", 70,
    rounds=[{"q_start": 1, "digits": [5], "q_end": 3, "answer": [5]}],
    label_turns=[(5, [d(5)] + [PAD] * 55, 61)],
    trace_turns=[(5, [d(5)] + [PAD] * 33, 40)],
    onset=30,
    expected={"correct": True, "round_correct": [True], "tor": 1.0,
              "latencies": [2], "barge": {"latency": 10, "success": True},
              "anomalies": {}},
))

assert len(fixtures) == 20, len(fixtures)
out_path = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures", "metric_fixtures.json")
os.makedirs(os.path.dirname(out_path), exist_ok=True)
with open(out_path, "w", encoding="utf-8") as fh:
    json.dump({"fixtures": fixtures}, fh, indent=1)
print(f"wrote {len(fixtures)} fixtures to {out_path}")
