"""Frame-synchronous streaming inference.

Lock-step contract: one agent emission per consumed user frame. The timing
head gates emission; above threshold the greedy token is spoken and its
embedding carries to the next frame, below it the agent stays silent and the
vocabulary-weighted latent carries instead (the thinking path). After an
<EOS> the agent is forced silent until the gate fires with a fresh <BOS>;
the forced frames also carry latents.

Two degenerate cases are fixed here because the gating rule alone does not
cover them: an above-threshold argmax of <SIL> emits <SIL> but carries the
<SIL> token embedding, and any control token other than <BOS> that fires
while listening is emitted verbatim (metrics flag such frames as anomalies).

Sessions are batchable: all state arrays have a leading stream axis, so 200
evaluation dialogues advance in lock step through the same kernels a single
live session uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ModelParams,
    StepState,
    decoder_step,
    encoder_step,
    init_step_state,
)
from .vocab import TextVocab

PHASE_LISTENING = "LISTENING"
PHASE_SPEAKING = "SPEAKING"


@dataclass
class StepOutput:
    token: int  # agent text token id emitted this frame
    ghat: float
    phase: str  # phase after the step
    end_of_turn: bool = False


@dataclass
class EventTrace:
    """Per-frame record of one dialogue run; everything metrics need."""

    user: list[int] = field(default_factory=list)
    agent: list[int] = field(default_factory=list)
    ghat: list[float] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)
    # optional embedding capture (export path)
    audio_embeds: list[np.ndarray] = field(default_factory=list)
    latent_embeds: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.agent)

    def bos_frames(self) -> list[int]:
        return [i for i, t in enumerate(self.agent) if t == TextVocab.BOS_ID]

    def eos_frames(self) -> list[int]:
        return [i for i, t in enumerate(self.agent) if t == TextVocab.EOS_ID]


class BatchRunner:
    """Advances B synchronized sessions one frame at a time."""

    def __init__(self, params: ModelParams, batch: int = 1, capture: bool = False):
        self.params = params
        self.cfg = params.config
        self.raw = params.raw()
        self.state: StepState = init_step_state(params, batch)
        self.batch = batch
        self.capture = capture
        self.tau = self.cfg.latent_temp
        self.theta = self.cfg.timing_threshold
        self.latent_on = self.cfg.latent_inference
        self._embed = self.raw["text_embed"]
        self._sil_row = self._embed[TextVocab.SIL_ID]

    @property
    def frame(self) -> int:
        return self.state.frame

    def step(self, audio_ids: np.ndarray) -> dict[str, np.ndarray]:
        """Consume one user frame per stream; returns per-stream outputs."""
        st = self.state
        x = encoder_step(self.params, st, audio_ids)
        h_in = x + st.carry
        _, logits, ghat, _ = decoder_step(st, h_in, self.params)

        argmax = logits.argmax(axis=-1)
        fire = ghat >= self.theta
        token = np.where(fire, argmax, TextVocab.SIL_ID)

        # post-<EOS> silence: only a fresh <BOS> may break it
        bos_now = fire & (argmax == TextVocab.BOS_ID)
        forced = st.armed & ~bos_now
        token = np.where(forced, TextVocab.SIL_ID, token)

        is_bos = token == TextVocab.BOS_ID
        is_eos = token == TextVocab.EOS_ID
        st.speaking = np.where(is_bos, True, np.where(is_eos, False, st.speaking))
        st.armed = (st.armed & ~bos_now) | is_eos

        # carry selection: emitted-or-degenerate-<SIL> frames carry the token
        # embedding, everything else carries the latent
        token_path = fire & ~forced
        if self.latent_on:
            scaled = logits * np.float32(1.0 / self.tau)
            e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
            weights = e / e.sum(axis=-1, keepdims=True)
            latent = weights @ self._embed
        else:
            latent = np.broadcast_to(self._sil_row, (self.batch, self._embed.shape[1]))
        st.carry = np.where(token_path[:, None], self._embed[token], latent).astype(np.float32)

        out = {
            "token": token,
            "ghat": ghat,
            "speaking": st.speaking.copy(),
            "end_of_turn": is_eos,
            "latent_carried": ~token_path,
        }
        if self.capture:
            out["x"] = x
            out["latent"] = latent
        return out


def run_dialogues(
    params: ModelParams,
    streams: list[list[int]],
    capture: bool = False,
) -> list[EventTrace]:
    """Fold the engine over several user streams in lock step."""
    if not streams:
        return []
    B = len(streams)
    lengths = np.array([len(s) for s in streams], dtype=np.int64)
    if (lengths == 0).any():
        raise ValueError("run_dialogues: empty user stream")
    T = int(lengths.max())
    padded = np.zeros((B, T), dtype=np.int64)
    for i, s in enumerate(streams):
        padded[i, : len(s)] = s
    runner = BatchRunner(params, batch=B, capture=capture)
    traces = [EventTrace() for _ in range(B)]
    for t in range(T):
        out = runner.step(padded[:, t])
        alive = t < lengths
        for i in np.flatnonzero(alive):
            tr = traces[i]
            tr.user.append(int(padded[i, t]))
            tr.agent.append(int(out["token"][i]))
            tr.ghat.append(float(out["ghat"][i]))
            tr.phase.append(PHASE_SPEAKING if out["speaking"][i] else PHASE_LISTENING)
            if capture:
                tr.audio_embeds.append(out["x"][i].copy())
                if out["latent_carried"][i]:
                    tr.latent_embeds.append((t, out["latent"][i].copy()))
    return traces


def run_dialogue(params: ModelParams, user_stream: list[int], capture: bool = False) -> EventTrace:
    """Single-stream convenience wrapper; deterministic."""
    return run_dialogues(params, [user_stream], capture=capture)[0]


class Session:
    """One live dialogue: a batch-of-one runner plus its running trace."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.runner = BatchRunner(params, batch=1)
        self.trace = EventTrace()

    @property
    def frame(self) -> int:
        return self.runner.frame

    def step(self, audio_id: int) -> StepOutput:
        out = self.runner.step(np.array([audio_id], dtype=np.int64))
        token = int(out["token"][0])
        result = StepOutput(
            token=token,
            ghat=float(out["ghat"][0]),
            phase=PHASE_SPEAKING if out["speaking"][0] else PHASE_LISTENING,
            end_of_turn=bool(out["end_of_turn"][0]),
        )
        self.trace.user.append(int(audio_id))
        self.trace.agent.append(token)
        self.trace.ghat.append(result.ghat)
        self.trace.phase.append(result.phase)
        return result


def session_step(session: Session, audio_id: int) -> StepOutput:
    return session.step(audio_id)
