"""Synthetic duplex-dialogue generation and JSON Lines serialization.

Three data regimes come out of here: pseudo-continuation dialogues for
pretraining, instruction-style QA dialogues, and interruption-augmented QA.
All generation is a pure function of (config, seed); each record owns its own
generator so parallel and serial runs produce identical corpora.

Frame-duration convention: 1 frame = 80 ms (12.5 Hz), so the second-valued
rules become frame counts (4 s -> 50 frames, 0.64 s -> 8 frames).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .stream import DuplexRecord, Events, RoundEvent, build_agent_stream, g_labels
from .vocab import TASKS, Vocabs


class DataError(Exception):
    """Raised for unreadable or malformed corpus data."""


@dataclass
class GenConfig:
    task_mix: dict[str, float] = field(
        default_factory=lambda: {t: 1.0 / len(TASKS) for t in TASKS}
    )
    n_range: tuple[int, int] = (1, 6)  # digits per query
    rounds_range: tuple[int, int] = (1, 4)
    usil_gap_range: tuple[int, int] = (0, 1)  # silence between query symbols
    gap_range: tuple[int, int] = (0, 3)  # silence between q_end and <BOS>
    lead_range: tuple[int, int] = (1, 3)
    tail_range: tuple[int, int] = (2, 5)
    pad_long_prob: float = 0.15  # long-held turns, the interruptible ones
    pad_long_range: tuple[int, int] = (51, 64)
    interrupt_prob: float = 0.10
    interrupt_onset_frac: tuple[float, float] = (0.2, 0.8)
    interrupt_delay: int = 8  # frames of original content kept after onset
    min_interruptible: int = 50  # response span must exceed this
    continuation_decay: float = 0.5
    single_turn_prob: float = 0.8
    max_turn_words: int = 200
    sent_count_range: tuple[int, int] = (2, 6)
    sent_len_range: tuple[int, int] = (3, 10)
    noise_prob: float = 0.5
    snr_range: tuple[float, float] = (0.0, 60.0)
    seed: int = 0

    def __post_init__(self):
        for p in (self.interrupt_prob, self.noise_prob, self.pad_long_prob, self.single_turn_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"GenConfig: probability {p} outside [0, 1]")
        lo, hi = self.interrupt_onset_frac
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("GenConfig: onset fraction range must sit inside (0, 1)")
        for rng_field in ("n_range", "rounds_range", "usil_gap_range", "gap_range",
                          "lead_range", "tail_range", "pad_long_range",
                          "sent_count_range", "sent_len_range"):
            a, b = getattr(self, rng_field)
            if a > b:
                raise ValueError(f"GenConfig: empty range {rng_field}={a, b}")


@dataclass
class TaskInstance:
    task: str
    digits: list[int]
    answer_digits: list[int]


def task_answer(task: str, digits: list[int]) -> list[int]:
    """Answer digits for each toy task. Parity reports the sum's parity."""
    if task == "copy":
        return list(digits)
    if task == "rev":
        return list(reversed(digits))
    if task == "sum":
        return [sum(digits) % 10]
    if task == "max":
        return [max(digits)]
    if task == "par":
        return [sum(digits) % 2]
    raise ValueError(f"unknown task '{task}'")


def _sample_task(cfg: GenConfig, rng: np.random.Generator) -> str:
    names = sorted(cfg.task_mix)
    weights = np.array([cfg.task_mix[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    return names[int(rng.choice(len(names), p=weights))]


def make_task_instance(cfg: GenConfig, rng: np.random.Generator) -> TaskInstance:
    task = _sample_task(cfg, rng)
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    digits = [int(d) for d in rng.integers(0, 10, size=n)]
    return TaskInstance(task, digits, task_answer(task, digits))


def _randint(rng: np.random.Generator, lo_hi: tuple[int, int]) -> int:
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _sample_pad(cfg: GenConfig, response_len: int, rng: np.random.Generator) -> int:
    if rng.random() < cfg.pad_long_prob:
        return _randint(rng, cfg.pad_long_range)
    return int(rng.integers(0, response_len + 1))


class _ChannelBuilder:
    """Grows the three parallel per-frame lists in lock step."""

    def __init__(self, vocabs: Vocabs):
        self.v = vocabs
        self.user: list[int] = []
        self.agent: list[int] = []

    def __len__(self) -> int:
        return len(self.user)

    def silence(self, n: int) -> None:
        self.user.extend([self.v.audio.USIL_ID] * n)
        self.agent.extend([self.v.text.SIL_ID] * n)

    def user_says(self, symbols: list[int], gap_range: tuple[int, int], rng) -> None:
        for i, sym in enumerate(symbols):
            self.user.append(sym)
            self.agent.append(self.v.text.SIL_ID)
            if i < len(symbols) - 1:
                self.silence(_randint(rng, gap_range))

    def agent_turn(self, turn_tokens: list[int]) -> tuple[int, int]:
        bos = len(self.agent)
        self.agent.extend(turn_tokens)
        self.user.extend([self.v.audio.USIL_ID] * len(turn_tokens))
        return bos, len(self.agent) - 1


def _query_symbols(inst: TaskInstance, vocabs: Vocabs) -> list[int]:
    av = vocabs.audio
    return [av.marker_id(inst.task)] + [av.digit_id(d) for d in inst.digits] + [av.query_end_id]


def gen_dialogue(cfg: GenConfig, vocabs: Vocabs, rng: np.random.Generator, seed: int = 0) -> DuplexRecord:
    """One QA dialogue of 1-4 rounds: the user streams a query one symbol per
    frame (with silence gaps), and after a sampled pause the agent answers in
    the standard turn layout."""
    rounds = _randint(rng, cfg.rounds_range)
    cb = _ChannelBuilder(vocabs)
    events = Events()
    cb.silence(_randint(rng, cfg.lead_range))
    for _ in range(rounds):
        inst = make_task_instance(cfg, rng)
        q_start = len(cb)
        cb.user_says(_query_symbols(inst, vocabs), cfg.usil_gap_range, rng)
        q_end = len(cb) - 1
        cb.silence(_randint(rng, cfg.gap_range))
        answer_ids = [vocabs.text.digit_id(d) for d in inst.answer_digits]
        pad = _sample_pad(cfg, len(answer_ids), rng)
        turn = build_agent_stream(0, answer_ids, pad, vocabs.text)
        bos, eos = cb.agent_turn(turn)
        events.rounds.append(RoundEvent(q_start, q_end, inst.task, answer_ids))
        events.turns.append((bos, eos))
        cb.silence(_randint(rng, cfg.tail_range))
    record = DuplexRecord(
        user=cb.user,
        agent=cb.agent,
        g=g_labels(cb.agent, vocabs.text),
        events=events,
        seed=seed,
        kind="qa",
    )
    return record


def segment_turns(
    sentence_lengths: list[int],
    rng: np.random.Generator,
    single_turn_prob: float = 0.8,
    decay: float = 0.5,
    max_turn_words: int = 200,
) -> list[list[int]]:
    """Group consecutive sentences into alternating turns.

    After the k-th sentence of a turn the next one is appended with
    probability (1 - single_turn_prob) * decay**(k-1); a turn is force-closed
    once its cumulative word count exceeds max_turn_words.
    """
    if not sentence_lengths:
        raise ValueError("segment_turns: empty sentence list")
    turns: list[list[int]] = []
    current: list[int] = []
    words = 0
    for idx, n_words in enumerate(sentence_lengths):
        current.append(idx)
        words += n_words
        k = len(current)
        p_continue = (1.0 - single_turn_prob) * decay ** (k - 1)
        if words > max_turn_words or rng.random() >= p_continue:
            turns.append(current)
            current = []
            words = 0
    if current:
        turns.append(current)
    return turns


def gen_continuation_dialogue(
    cfg: GenConfig,
    vocabs: Vocabs,
    rng: np.random.Generator,
    seed: int = 0,
    swap_roles: bool = False,
) -> DuplexRecord:
    """Pseudo-dialogue from random word-token sentences split across the two
    roles; agent turns use the standard layout. Only the pretraining stage
    consumes these."""
    n_sent = _randint(rng, cfg.sent_count_range)
    if n_sent <= 0:
        raise ValueError("gen_continuation_dialogue: need at least one sentence")
    sentences = [
        [int(w) for w in rng.integers(0, vocabs.n_words, size=_randint(rng, cfg.sent_len_range))]
        for _ in range(n_sent)
    ]
    lengths = [len(s) for s in sentences]
    groups = segment_turns(lengths, rng, cfg.single_turn_prob, cfg.continuation_decay, cfg.max_turn_words)

    cb = _ChannelBuilder(vocabs)
    events = Events()
    cb.silence(_randint(rng, cfg.lead_range))
    for turn_idx, group in enumerate(groups):
        words = [w for s_idx in group for w in sentences[s_idx]]
        user_side = (turn_idx % 2 == 0) != swap_roles
        if user_side:
            symbols = [vocabs.audio.filler_id(w % vocabs.n_fillers) for w in words]
            cb.user_says(symbols, cfg.usil_gap_range, rng)
            cb.silence(_randint(rng, cfg.gap_range))
        else:
            tokens = [vocabs.text.word_id(w) for w in words]
            pad = int(rng.integers(0, len(tokens) + 1))
            bos, eos = cb.agent_turn(build_agent_stream(0, tokens, pad, vocabs.text))
            events.turns.append((bos, eos))
            cb.silence(_randint(rng, cfg.gap_range))
    cb.silence(_randint(rng, cfg.tail_range))
    return DuplexRecord(
        user=cb.user,
        agent=cb.agent,
        g=g_labels(cb.agent, vocabs.text),
        events=events,
        seed=seed,
        kind="continuation",
    )


def inject_interruption(
    record: DuplexRecord,
    cfg: GenConfig,
    vocabs: Vocabs,
    rng: np.random.Generator,
    force: bool = False,
) -> DuplexRecord:
    """Barge-in augmentation. For each agent turn whose response span exceeds
    the eligibility floor, trigger with interrupt_prob: the user starts a new
    query at an onset sampled inside the span, the agent keeps its original
    tokens for interrupt_delay more frames and then yields with <EOS>; the
    rest of the dialogue is rebuilt so the interrupting query gets answered.

    At most one interruption lands per record. Rounds supervising content the
    interruption cut off are dropped from the expected answers.
    """
    for turn_idx, (bos, eos) in enumerate(record.events.turns):
        span = eos - bos + 1
        if span <= cfg.min_interruptible:
            continue
        if not force and rng.random() >= cfg.interrupt_prob:
            continue
        frac = rng.uniform(*cfg.interrupt_onset_frac)
        onset_rel = int(span * frac)
        onset = bos + onset_rel
        forced_eos = onset + cfg.interrupt_delay
        if forced_eos >= eos:
            # delay would run past the original turn end; nothing to cut
            return record

        tv, av = vocabs.text, vocabs.audio
        user = record.user[:onset]
        agent = record.agent[:forced_eos]
        agent.append(tv.EOS_ID)

        # user speaks the interrupting query from the onset frame
        inst = make_task_instance(cfg, rng)
        symbols = _query_symbols(inst, vocabs)
        q_start = onset
        cursor = onset
        for i, sym in enumerate(symbols):
            user.append(sym)
            cursor += 1
            if i < len(symbols) - 1:
                gap = _randint(rng, cfg.usil_gap_range)
                user.extend([av.USIL_ID] * gap)
                cursor += gap
        q_end = cursor - 1

        # pad both channels out to a common frontier
        while len(agent) < len(user):
            agent.append(tv.SIL_ID)
        while len(user) < len(agent):
            user.append(av.USIL_ID)

        # answer the interrupting query in a fresh appended turn
        gap = _randint(rng, cfg.gap_range)
        target = max(q_end + 1 + gap, forced_eos + 2)
        while len(user) < target:
            user.append(av.USIL_ID)
            agent.append(tv.SIL_ID)
        answer_ids = [tv.digit_id(d) for d in inst.answer_digits]
        pad = int(rng.integers(0, len(answer_ids) + 1))
        turn = build_agent_stream(0, answer_ids, pad, tv)
        new_bos = len(agent)
        agent.extend(turn)
        user.extend([av.USIL_ID] * len(turn))
        new_eos = len(agent) - 1
        tail = _randint(rng, cfg.tail_range)
        user.extend([av.USIL_ID] * tail)
        agent.extend([tv.SIL_ID] * tail)

        # rebuild events: keep earlier rounds, keep the interrupted round only
        # if its content tokens were all emitted before the onset
        rounds = list(record.events.rounds[:turn_idx])
        if turn_idx < len(record.events.rounds):
            cut_round = record.events.rounds[turn_idx]
            if onset > bos + len(cut_round.answer):
                rounds.append(cut_round)
        rounds.append(RoundEvent(q_start, q_end, inst.task, answer_ids))
        turns = list(record.events.turns[:turn_idx])
        turns.append((bos, forced_eos))
        turns.append((new_bos, new_eos))
        events = Events(
            rounds=rounds,
            turns=turns,
            interruption_onset=onset,
            interrupted_turn=turn_idx,
        )
        return DuplexRecord(
            user=user,
            agent=agent,
            g=g_labels(agent, tv),
            events=events,
            seed=record.seed,
            kind=record.kind,
            snr_db=record.snr_db,
        )
    return record


def noise_plan(record: DuplexRecord, cfg: GenConfig, rng: np.random.Generator) -> DuplexRecord:
    """Attach a signal-to-noise ratio with probability noise_prob; training
    realizes it as a perturbation on encoder outputs."""
    if rng.random() < cfg.noise_prob:
        return replace(record, snr_db=float(rng.uniform(*cfg.snr_range)))
    return record


def gen_qa_corpus(cfg: GenConfig, vocabs: Vocabs, n: int, base_seed: int | None = None) -> list[DuplexRecord]:
    """n interruption/noise-augmented QA records, one child generator each."""
    if n <= 0:
        raise ValueError("gen_qa_corpus: n must be positive")
    base = cfg.seed if base_seed is None else base_seed
    out = []
    for i in range(n):
        rng = np.random.default_rng(base + i)
        rec = gen_dialogue(cfg, vocabs, rng, seed=base + i)
        rec = inject_interruption(rec, cfg, vocabs, rng)
        rec = noise_plan(rec, cfg, rng)
        out.append(rec)
    return out


def gen_continuation_corpus(cfg: GenConfig, vocabs: Vocabs, n: int, base_seed: int | None = None) -> list[DuplexRecord]:
    if n <= 0:
        raise ValueError("gen_continuation_corpus: n must be positive")
    base = cfg.seed if base_seed is None else base_seed
    out = []
    for i in range(n):
        rng = np.random.default_rng(base + i)
        rec = gen_continuation_dialogue(cfg, vocabs, rng, seed=base + i, swap_roles=bool(i % 2))
        rec = noise_plan(rec, cfg, rng)
        out.append(rec)
    return out


# -- serialization -------------------------------------------------------------


def record_to_json(record: DuplexRecord, vocabs: Vocabs) -> dict:
    ev = record.events
    obj = {
        "user": [vocabs.audio.surface(s) for s in record.user],
        "agent": [vocabs.text.surface(t) for t in record.agent],
        "g": list(record.g),
        "events": {
            "queries": [[r.query_start, r.query_end, r.task] for r in ev.rounds],
            "answers": [[vocabs.text.surface(t) for t in r.answer] for r in ev.rounds],
            "turns": [list(t) for t in ev.turns],
            "interruption_onset": ev.interruption_onset,
            "interrupted_turn": ev.interrupted_turn,
        },
        "task": record.kind,
        "seed": record.seed,
    }
    if record.snr_db is not None:
        obj["snr_db"] = record.snr_db
    return obj


def record_from_json(obj: dict, vocabs: Vocabs) -> DuplexRecord:
    ev_obj = obj["events"]
    rounds = [
        RoundEvent(q[0], q[1], q[2], [vocabs.text.id(t) for t in ans])
        for q, ans in zip(ev_obj["queries"], ev_obj["answers"])
    ]
    events = Events(
        rounds=rounds,
        turns=[tuple(t) for t in ev_obj["turns"]],
        interruption_onset=ev_obj.get("interruption_onset"),
        interrupted_turn=ev_obj.get("interrupted_turn"),
    )
    return DuplexRecord(
        user=[vocabs.audio.id(s) for s in obj["user"]],
        agent=[vocabs.text.id(t) for t in obj["agent"]],
        g=[int(x) for x in obj["g"]],
        events=events,
        seed=int(obj["seed"]),
        kind=obj.get("task", "qa"),
        snr_db=obj.get("snr_db"),
    )


def write_jsonl(records: list[DuplexRecord], path: str, vocabs: Vocabs) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec, vocabs)) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str, vocabs: Vocabs) -> list[DuplexRecord]:
    records = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(json.loads(line), vocabs))
            except (json.JSONDecodeError, KeyError, ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records
