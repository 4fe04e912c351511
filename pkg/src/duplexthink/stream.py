"""Synchronized two-channel frame layout shared by training and inference.

One frame carries one user symbol and one agent token slot. Agent turns
follow the layout [<SIL>..., <BOS>, response..., <PAD>..., <EOS>]; the
speaking indicator g is 1 from <BOS> through <EOS> inclusive. The carry-in
convention fixes the one-step shift: the input consumed at frame t pairs the
current user frame with the channel feedback produced at frame t-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .vocab import AudioVocab, TextVocab


@dataclass
class RoundEvent:
    """One user query and the answer the agent is expected to give."""

    query_start: int
    query_end: int  # frame carrying the q_end symbol
    task: str
    answer: list[int]  # text-token ids, content tokens only


@dataclass
class Events:
    rounds: list[RoundEvent] = field(default_factory=list)
    turns: list[tuple[int, int]] = field(default_factory=list)  # (bos, eos) frames
    interruption_onset: int | None = None
    interrupted_turn: int | None = None


@dataclass
class DuplexRecord:
    """One synchronized dialogue: per-frame user channel, agent channel,
    speaking labels, and the event annotations metrics need."""

    user: list[int]
    agent: list[int]
    g: list[int]
    events: Events
    seed: int
    kind: str = "qa"
    snr_db: float | None = None

    def __len__(self) -> int:
        return len(self.user)


def build_agent_stream(
    listen_len: int,
    response: Sequence[int],
    pad_len: int,
    vocab: TextVocab,
) -> list[int]:
    """[<SIL>*listen_len, <BOS>, response..., <PAD>*pad_len, <EOS>]."""
    if not response:
        raise ValueError("build_agent_stream: response must be nonempty")
    controls = set(vocab.control_ids)
    for tok in response:
        if tok in controls:
            raise ValueError(f"build_agent_stream: control token {vocab.surface(tok)} inside response")
    return (
        [vocab.SIL_ID] * listen_len
        + [vocab.BOS_ID]
        + list(response)
        + [vocab.PAD_ID] * pad_len
        + [vocab.EOS_ID]
    )


def g_labels(agent: Sequence[int], vocab: TextVocab) -> list[int]:
    """1 on every frame from a <BOS> through its matching <EOS>, inclusive."""
    g = [0] * len(agent)
    open_bos: int | None = None
    for i, tok in enumerate(agent):
        if tok == vocab.BOS_ID:
            if open_bos is not None:
                raise ValueError(f"g_labels: nested <BOS> at frame {i}")
            open_bos = i
        elif tok == vocab.EOS_ID:
            if open_bos is None:
                raise ValueError(f"g_labels: <EOS> without <BOS> at frame {i}")
            for j in range(open_bos, i + 1):
                g[j] = 1
            open_bos = None
    if open_bos is not None:
        raise ValueError(f"g_labels: unmatched <BOS> at frame {open_bos}")
    return g


def carry_in(
    record: DuplexRecord,
    t: int,
    latent_at: Callable[[int], object],
    embed: Callable[[int], object],
):
    """Channel feedback consumed at frame t.

    Frame 0 boots from the <SIL> embedding. Afterwards, if the agent was
    speaking at t-1 the previous token's embedding carries in; otherwise the
    latent produced at t-1 does.
    """
    if t == 0:
        return embed(TextVocab.SIL_ID)
    if record.g[t - 1] == 1:
        return embed(record.agent[t - 1])
    return latent_at(t - 1)


def validate(record: DuplexRecord, text_vocab: TextVocab, audio_vocab: AudioVocab) -> list[str]:
    """Check every structural invariant; returns one message per violation."""
    out: list[str] = []
    T = len(record.user)
    if len(record.agent) != T or len(record.g) != T:
        out.append(f"length: user={len(record.user)} agent={len(record.agent)} g={len(record.g)}")
        return out

    for i, sym in enumerate(record.user):
        if not 0 <= sym < len(audio_vocab):
            out.append(f"user[{i}]: symbol id {sym} out of range")
    for i, tok in enumerate(record.agent):
        if not 0 <= tok < len(text_vocab):
            out.append(f"agent[{i}]: token id {tok} out of range")
    if out:
        return out

    # pair up turns
    turns: list[tuple[int, int]] = []
    open_bos: int | None = None
    for i, tok in enumerate(record.agent):
        if tok == text_vocab.BOS_ID:
            if open_bos is not None:
                out.append(f"agent[{i}]: <BOS> while turn open since {open_bos}")
            open_bos = i
        elif tok == text_vocab.EOS_ID:
            if open_bos is None:
                out.append(f"agent[{i}]: <EOS> without open turn")
            else:
                turns.append((open_bos, i))
                open_bos = None
    if open_bos is not None:
        out.append(f"agent[{open_bos}]: turn never closed")

    in_turn = [False] * T
    for bos, eos in turns:
        for i in range(bos, eos + 1):
            in_turn[i] = True
        # layout inside a turn: BOS, content+, PAD*, EOS
        body = record.agent[bos + 1 : eos]
        seen_pad = False
        if not body:
            out.append(f"turn@{bos}: empty response")
        for off, tok in enumerate(body):
            i = bos + 1 + off
            if tok == text_vocab.SIL_ID:
                out.append(f"agent[{i}]: <SIL> inside turn")
            elif tok == text_vocab.PAD_ID:
                seen_pad = True
            elif seen_pad:
                out.append(f"agent[{i}]: content token after first <PAD>")
        if body and body[0] == text_vocab.PAD_ID:
            out.append(f"agent[{bos + 1}]: turn starts with <PAD>")

    for i in range(T):
        if in_turn[i]:
            if record.g[i] != 1:
                out.append(f"g[{i}]: 0 inside turn")
        else:
            if record.g[i] != 0:
                out.append(f"g[{i}]: 1 outside any turn")
            if record.agent[i] != text_vocab.SIL_ID:
                out.append(f"agent[{i}]: non-<SIL> outside any turn")

    if record.events.turns and record.events.turns != turns:
        out.append("events: turn spans disagree with the agent channel")
    return out
