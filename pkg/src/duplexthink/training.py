"""Loss library, noise augmentation, and the staged training pipeline.

Stages:
  pretrain  - conventional full-duplex objective: next-token CE over every
              frame (the model must learn to emit <SIL> while listening)
              plus the timing loss; the expert is untouched.
  sft1      - latent mode, reconstruction loss only; gradients reach the
              expert through the latent labels and the decoder jointly.
  sft2      - latent mode, full objective reco + alpha*regu + beta*time with
              the stop-gradient active inside the regularizer.
  baseline  - the pretrain objective end to end; produces the no-latent
              comparator checkpoint.
"""

from __future__ import annotations

import json
import math
import os
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .corpus import DataError, read_jsonl
from .model import (
    ModelConfig,
    ModelParams,
    PackedBatch,
    encode_batch,
    forward_from_x,
    load_checkpoint,
    pack_records,
    save_checkpoint,
)
from .optim import OptimizerState, adamw_step, clip_global_norm
from .stream import DuplexRecord
from .tensor import Tensor
from .vocab import TextVocab

STAGES = ("pretrain", "sft1", "sft2", "baseline")


@dataclass
class StageConfig:
    stage: str
    steps: int = 1000
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup: int = 100
    alpha: float = 3.0  # regularizer weight
    beta: float = 5.0  # timing weight
    bos_scale: float = 20.0
    eos_scale: float = 10.0
    grad_clip: float = 1.0
    seed: int = 0
    freeze_decoder: bool = False  # sft1 option: train only the expert
    log_every: int = 25

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"StageConfig: unknown stage '{self.stage}'")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("StageConfig: loss weights must be nonnegative")
        if self.bos_scale < 1 or self.eos_scale < 1:
            raise ValueError("StageConfig: token scales must be >= 1")

    @property
    def mode(self) -> str:
        return "latent" if self.stage in ("sft1", "sft2") else "pretrain"


@dataclass
class LossBreakdown:
    reco: float
    regu: float
    time: float
    elbo: float
    speaking_frames: int
    listening_frames: int


# -- losses ----------------------------------------------------------------------


def loss_reco(
    logits: Tensor,
    labels: np.ndarray,
    g: np.ndarray,
    bos_scale: float = 1.0,
    eos_scale: float = 1.0,
) -> Tensor:
    """Masked, control-token-weighted next-token cross entropy.

    logits (N, |V|), labels (N,) ids, g (N,) in {0,1}. Positions with g=0
    contribute nothing; the <BOS>/<EOS> positions are up-weighted. Returns a
    per-position weighted mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError("loss_reco: label out of vocabulary range")
    g = np.asarray(g, dtype=np.float32)
    w = np.ones_like(g)
    w += (bos_scale - 1.0) * (labels == TextVocab.BOS_ID)
    w += (eos_scale - 1.0) * (labels == TextVocab.EOS_ID)
    w *= g
    denom = float(w.sum())
    if denom <= 0:
        return Tensor(np.float32(0.0))
    picked = tz.take_along_last(tz.log_softmax(logits, axis=-1), labels)
    return tz.tsum(picked * w) * (-1.0 / denom)


def loss_regu(w_expert, logits: Tensor, g: np.ndarray) -> Tensor:
    """Mean KL(sg[W_e] || softmax(logits)) over listening positions.

    The expert weighting enters as a constant (the stop-gradient), so this
    loss trains the decoder's listening distribution only.
    """
    w = w_expert.data if isinstance(w_expert, Tensor) else np.asarray(w_expert, dtype=np.float32)
    if w.shape != tuple(logits.shape):
        raise ValueError(f"loss_regu: shape mismatch {w.shape} vs {logits.shape}")
    mask = 1.0 - np.asarray(g, dtype=np.float32)
    denom = float(mask.sum())
    if denom <= 0:
        return Tensor(np.float32(0.0))
    neg_entropy = np.sum(w * np.log(np.maximum(w, 1e-9)), axis=-1)  # constant term
    cross = tz.tsum(tz.log_softmax(logits, axis=-1) * w, axis=-1)
    kl = Tensor(neg_entropy.astype(np.float32)) - cross
    return tz.tsum(kl * mask) * (1.0 / denom)


def loss_time(ghat: Tensor, g: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean binary cross entropy between the timing prediction and g."""
    g = np.asarray(g, dtype=np.float32)
    p = tz.clip(ghat, eps, 1.0 - eps)
    terms = tz.log(p) * g + tz.log(1.0 - p) * (1.0 - g)
    return tz.tmean(terms) * -1.0


def apply_noise(x: Tensor, snr_db: float, rng: np.random.Generator) -> Tensor:
    """Additive white perturbation calibrated to the stream's RMS:
    sigma = rms(x) * 10**(-snr/20)."""
    if snr_db < 0:
        raise ValueError("apply_noise: snr must be >= 0 dB")
    rms = float(np.sqrt(np.mean(x.data.astype(np.float64) ** 2)))
    sigma = rms * 10.0 ** (-snr_db / 20.0)
    noise = rng.normal(0.0, sigma, size=x.shape).astype(np.float32)
    return x + Tensor(noise)


def _apply_noise_batch(x: Tensor, batch: PackedBatch, rng: np.random.Generator) -> Tensor:
    """Per-record noise on encoder outputs; rows without an SNR marker are
    passed through untouched. RMS is measured over each record's valid frames."""
    if all(s is None for s in batch.snr_db):
        return x
    B, T, d = x.shape
    noise = np.zeros((B, T, d), dtype=np.float32)
    for i, snr in enumerate(batch.snr_db):
        if snr is None:
            continue
        n = int(batch.lengths[i])
        rms = float(np.sqrt(np.mean(x.data[i, :n].astype(np.float64) ** 2)))
        sigma = rms * 10.0 ** (-snr / 20.0)
        noise[i, :n] = rng.normal(0.0, sigma, size=(n, d))
    return x + Tensor(noise)


# -- one optimization step ---------------------------------------------------------


def _trainable(params: ModelParams, stage: StageConfig) -> dict[str, Tensor]:
    if stage.stage in ("pretrain", "baseline"):
        return {k: params.tensors[k] for k in params.non_expert_names()}
    if stage.stage == "sft1" and stage.freeze_decoder:
        return {k: params.tensors[k] for k in params.expert_names()}
    return dict(params.tensors)


@dataclass
class LossGraph:
    """Loss tensors over one batch, plus the gate that severs the latent-label
    input edge during the regularizer's backward pass."""

    reco: Tensor
    regu: Tensor | None
    time: Tensor
    z_gate: tz.GradGate
    speaking_frames: int
    listening_frames: int


def compute_losses(
    records: list[DuplexRecord],
    params: ModelParams,
    stage: StageConfig,
    noise_rng: np.random.Generator | None = None,
) -> LossGraph:
    """Forward pass plus loss graphs for one batch, stage semantics applied."""
    batch = pack_records(records)
    x = encode_batch(params, batch.user)
    if noise_rng is not None:
        x = _apply_noise_batch(x, batch, noise_rng)
    z_gate = tz.GradGate()
    out = forward_from_x(params, batch, x, stage.mode, z_gate=z_gate)

    B, T = batch.agent.shape
    nv = params.config.text_vocab_size
    idx = np.flatnonzero(batch.valid.reshape(-1))
    logits = tz.take_rows(tz.reshape(out.logits, (B * T, nv)), idx)
    ghat = tz.reshape(out.ghat, (B * T,))[idx]
    labels = batch.agent.reshape(-1)[idx]
    g = batch.g.reshape(-1)[idx]

    l_time = loss_time(ghat, g)
    if stage.mode == "pretrain":
        reco = loss_reco(logits, labels, np.ones_like(g))
        regu = None
    else:
        reco = loss_reco(logits, labels, g, stage.bos_scale, stage.eos_scale)
        w_e = tz.take_rows(tz.reshape(out.w_expert, (B * T, nv)), idx)
        regu = loss_regu(w_e, logits, g)
    return LossGraph(
        reco=reco,
        regu=regu,
        time=l_time,
        z_gate=z_gate,
        speaking_frames=int(g.sum()),
        listening_frames=int((1 - g).sum()),
    )


def _backward_stage(lg: LossGraph, stage: StageConfig) -> None:
    """Run the stage's backward passes with the agreed gradient routing: the
    regularizer never reaches the expert (neither through its target, which
    is a constant, nor through the teacher-forced latent inputs)."""
    if stage.stage == "sft1":
        lg.z_gate.open = True
        tz.backward(lg.reco)
        return
    if stage.stage == "sft2":
        lg.z_gate.open = False
        tz.backward(stage.alpha * lg.regu)
        lg.z_gate.open = True
        tz.backward(lg.reco + stage.beta * lg.time)
        return
    # pretrain / baseline
    tz.backward(lg.reco + stage.beta * lg.time)


def train_step(
    records: list[DuplexRecord],
    params: ModelParams,
    stage: StageConfig,
    opt: OptimizerState,
    noise_rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, float, float]:
    """Forward, backward, clip, AdamW over one batch.

    Returns (breakdown, grad_norm, lr). The breakdown always reports all
    three component values so the objective identity
    elbo = reco + alpha*regu + beta*time holds for every logged step, even in
    stages that optimize only a subset.
    """
    params.zero_grad()
    lg = compute_losses(records, params, stage, noise_rng)
    reco_val = float(lg.reco.data)
    regu_val = 0.0 if lg.regu is None else float(lg.regu.data)
    time_val = float(lg.time.data)
    elbo_val = reco_val + stage.alpha * regu_val + stage.beta * time_val
    if not math.isfinite(elbo_val):
        raise RuntimeError(
            f"train_step: non-finite loss in stage {stage.stage} "
            f"(reco={reco_val}, regu={regu_val}, time={time_val})"
        )

    _backward_stage(lg, stage)
    trainable = _trainable(params, stage)
    grad_norm = clip_global_norm(trainable, stage.grad_clip)
    lr = adamw_step(trainable, opt)
    breakdown = LossBreakdown(
        reco=reco_val,
        regu=regu_val,
        time=time_val,
        elbo=elbo_val,
        speaking_frames=lg.speaking_frames,
        listening_frames=lg.listening_frames,
    )
    return breakdown, grad_norm, lr


# -- the stage runner ---------------------------------------------------------------


def _batch_plan(n_records: int, lengths: list[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then bucket nearby-length records into batches to cut padding.
    Deterministic given the generator state."""
    order = rng.permutation(n_records)
    chunk = max(batch_size * 8, batch_size)
    batches: list[np.ndarray] = []
    for start in range(0, n_records, chunk):
        group = order[start : start + chunk]
        group = group[np.argsort([lengths[i] for i in group], kind="stable")]
        for b in range(0, len(group), batch_size):
            batches.append(group[b : b + batch_size])
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class StageResult:
    rows: list[dict]  # one entry per step
    wall_seconds: float
    out_ckpt: str | None = None

    def elbo_history(self) -> list[float]:
        return [r["elbo"] for r in self.rows]


def run_stage(
    data: str | list[DuplexRecord],
    stage: StageConfig,
    model_cfg: ModelConfig | None = None,
    in_ckpt: str | None = None,
    out_ckpt: str | None = None,
    log_path: str | None = None,
) -> StageResult:
    """Execute one training stage over a corpus.

    Every step's LossBreakdown is returned in memory; every log_every-th row
    also goes to the JSON-lines log. SFT stages refuse to start without an
    input checkpoint. The baseline stage's final checkpoint is marked
    latent-off so the engine replays it with plain token feedback.
    """
    if stage.stage in ("sft1", "sft2") and in_ckpt is None:
        raise ValueError(f"run_stage: stage {stage.stage} requires an input checkpoint")
    if in_ckpt is not None:
        params = load_checkpoint(in_ckpt)
    else:
        if model_cfg is None:
            raise ValueError("run_stage: need a model config when starting from scratch")
        params = ModelParams.init(model_cfg, seed=stage.seed)

    if isinstance(data, str):
        records = read_jsonl(data, params.config.vocabs())
    else:
        records = data
    if not records:
        raise DataError("run_stage: empty corpus")

    opt = OptimizerState(peak_lr=stage.peak_lr, warmup_steps=stage.warmup)
    rng = np.random.default_rng(stage.seed)
    lengths = [len(r) for r in records]
    plan: list[np.ndarray] = []
    rows: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    started = _time.perf_counter()
    try:
        for step in range(1, stage.steps + 1):
            if not plan:
                plan = _batch_plan(len(records), lengths, stage.batch_size, rng)
            batch_idx = plan.pop()
            batch = [records[i] for i in batch_idx]
            noise_rng = np.random.default_rng(stage.seed * 1_000_003 + step)
            breakdown, grad_norm, lr = train_step(batch, params, stage, opt, noise_rng)
            row = {
                "step": step,
                "stage": stage.stage,
                "reco": round(breakdown.reco, 6),
                "regu": round(breakdown.regu, 6),
                "time": round(breakdown.time, 6),
                "elbo": round(breakdown.elbo, 6),
                "lr": lr,
                "grad_norm": round(grad_norm, 6),
            }
            rows.append(row)
            if log_fh and (step % stage.log_every == 0 or step == 1 or step == stage.steps):
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    params.config.latent_inference = stage.stage != "baseline"
    if out_ckpt:
        save_checkpoint(params, out_ckpt)
    return StageResult(rows=rows, wall_seconds=_time.perf_counter() - started, out_ckpt=out_ckpt)
