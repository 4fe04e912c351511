"""Neural components of the duplex agent.

Four pieces share one parameter store: a strictly causal speech encoder over
user symbols, a decoder-only transformer consuming summed (speech + carry)
embeddings with an output head and a timing head, the latent-feedback
operator that turns logits into a vocabulary-convex embedding, and a
non-causal global expert that sees the whole dialogue (labels included) and
emits the target vocabulary weighting per frame.

Encoder and decoder use rotary relative positions and honor the attention
window; the expert uses learned absolute positions and full context. A
teacher-forced batch path and an incremental per-frame path compute the same
function (cache-equivalence is a tested contract).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from .stream import DuplexRecord
from .tensor import Tensor
from .vocab import TextVocab, Vocabs, build_vocabs

LN_EPS = 1e-5
NEG_INF = -1e9


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be read or does not match its config."""


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    enc_layers: int = 2
    expert_layers: int = 2
    window: int = 0  # frames of attention context; 0 = unlimited
    ffn_mult: int = 2  # FFN hidden width as a multiple of d_model
    text_vocab_size: int = 32
    audio_vocab_size: int = 24
    latent_temp: float = 1.0
    timing_threshold: float = 0.5
    max_frames: int = 1024
    n_words: int = 18
    n_fillers: int = 7
    latent_inference: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("ModelConfig: d_model must divide evenly across heads")
        if self.latent_temp <= 0:
            raise ValueError("ModelConfig: latent_temp must be positive")
        if not 0.0 < self.timing_threshold < 1.0:
            raise ValueError("ModelConfig: timing_threshold must lie in (0, 1)")
        if self.window < 0:
            raise ValueError("ModelConfig: window must be >= 0")

    def vocabs(self) -> Vocabs:
        v = build_vocabs(self.n_words, self.n_fillers)
        if len(v.text) != self.text_vocab_size or len(v.audio) != self.audio_vocab_size:
            raise ValueError(
                f"ModelConfig: vocab sizes {len(v.text)}/{len(v.audio)} disagree with "
                f"configured {self.text_vocab_size}/{self.audio_vocab_size}"
            )
        return v


def _block_names(prefix: str, d: int, ffn_mult: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.gain": (d,),
        f"{prefix}.ln1.bias": (d,),
        f"{prefix}.attn.wq": (d, d),
        f"{prefix}.attn.wk": (d, d),
        f"{prefix}.attn.wv": (d, d),
        f"{prefix}.attn.wo": (d, d),
        f"{prefix}.ln2.gain": (d,),
        f"{prefix}.ln2.bias": (d,),
        f"{prefix}.ffn.w1": (d, ffn_mult * d),
        f"{prefix}.ffn.b1": (ffn_mult * d,),
        f"{prefix}.ffn.w2": (ffn_mult * d, d),
        f"{prefix}.ffn.b2": (d,),
    }


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, nv, na = cfg.d_model, cfg.text_vocab_size, cfg.audio_vocab_size
    shapes: dict[str, tuple[int, ...]] = {"audio_embed": (na, d)}
    for i in range(cfg.enc_layers):
        shapes.update(_block_names(f"enc.h{i}", d, cfg.ffn_mult))
    shapes.update({"enc.ln_out.gain": (d,), "enc.ln_out.bias": (d,),
                   "enc.proj.w": (d, d), "enc.proj.b": (d,)})
    shapes["text_embed"] = (nv, d)
    for i in range(cfg.n_layers):
        shapes.update(_block_names(f"dec.h{i}", d, cfg.ffn_mult))
    shapes.update({"dec.ln_out.gain": (d,), "dec.ln_out.bias": (d,), "head.w": (d, nv)})
    shapes.update({"timing.w1": (d, d), "timing.b1": (d,),
                   "timing.w2": (d, 1), "timing.b2": (1,)})
    shapes["expert.pos"] = (cfg.max_frames, d)
    for i in range(cfg.expert_layers):
        shapes.update(_block_names(f"expert.h{i}", d, cfg.ffn_mult))
    shapes.update({"expert.ln_out.gain": (d,), "expert.ln_out.bias": (d,),
                   "expert.proj.w": (d, nv), "expert.proj.b": (nv,)})
    return shapes


class ModelParams:
    """All named weight tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = _param_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"ModelParams: missing parameter '{name}'")
            if tuple(tensors[name].shape) != shape:
                raise ValueError(
                    f"ModelParams: '{name}' has shape {tensors[name].shape}, expected {shape}"
                )

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}
        for name, shape in _param_shapes(config).items():
            if name.endswith(".gain"):
                data = np.ones(shape, dtype=np.float32)
            elif name.endswith((".bias", ".b", ".b1", ".b2")):
                data = np.zeros(shape, dtype=np.float32)
            else:
                std = 0.02
                if name.endswith((".attn.wo", ".ffn.w2")):
                    std = 0.02 / np.sqrt(2.0 * max(config.n_layers, 1))
                data = rng.normal(0.0, std, size=shape).astype(np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def named(self, prefix: str | None = None) -> dict[str, Tensor]:
        if prefix is None:
            return dict(self.tensors)
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def expert_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("expert.")]

    def non_expert_names(self) -> list[str]:
        return [k for k in self.tensors if not k.startswith("expert.")]

    def raw(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


# -- positional tables ---------------------------------------------------------

_ROPE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(n_pos: int, dh: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (n_pos, dh//2) for absolute positions 0..n_pos-1."""
    key = (n_pos, dh)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    half = dh // 2
    freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    ang = np.arange(n_pos, dtype=np.float64)[:, None] * freq[None, :]
    tables = (np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32))
    if n_pos <= 4096:
        _ROPE_CACHE[key] = tables
    return tables


_MASK_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _causal_window_mask(T: int, window: int) -> np.ndarray:
    """(1, 1, T, T) additive mask: position t may attend to
    j in [max(0, t-window+1), t] (all of 0..t when window == 0)."""
    key = (T, window)
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    allowed = j <= i
    if window > 0:
        allowed &= j >= i - (window - 1)
    mask = np.where(allowed, 0.0, NEG_INF).astype(np.float32)[None, None]
    if T <= 2048:
        _MASK_CACHE[key] = mask
    return mask


def _padding_mask(lengths: np.ndarray, T: int) -> np.ndarray | None:
    """(B, 1, 1, T) additive mask hiding padded key frames, or None."""
    lengths = np.asarray(lengths)
    if (lengths == T).all():
        return None
    j = np.arange(T)[None, :]
    return np.where(j < lengths[:, None], 0.0, NEG_INF).astype(np.float32)[:, None, None, :]


# -- batch (teacher-forced) forward ---------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return tz.transpose(tz.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _block_forward(
    params: ModelParams,
    prefix: str,
    x: Tensor,
    mask: np.ndarray | None,
    n_heads: int,
    rope_tabs: tuple[np.ndarray, np.ndarray] | None,
) -> Tensor:
    p = params
    d = x.shape[-1]
    dh = d // n_heads
    a_in = tz.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], LN_EPS)
    q = _split_heads(a_in @ p[f"{prefix}.attn.wq"], n_heads)
    k = _split_heads(a_in @ p[f"{prefix}.attn.wk"], n_heads)
    v = _split_heads(a_in @ p[f"{prefix}.attn.wv"], n_heads)
    if rope_tabs is not None:
        cos, sin = rope_tabs
        q = tz.rope(q, cos, sin)
        k = tz.rope(k, cos, sin)
    q = q * np.float32(1.0 / np.sqrt(dh))
    scores = q @ tz.transpose(k, (0, 1, 3, 2))
    ctx = _merge_heads(tz.softmax(scores, axis=-1, add_mask=mask) @ v) @ p[f"{prefix}.attn.wo"]
    x = x + ctx
    f_in = tz.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], LN_EPS)
    h = tz.gelu(f_in @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"])
    return x + (h @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"])


def _stack_forward(
    params: ModelParams,
    scope: str,
    n_layers: int,
    x: Tensor,
    mask: np.ndarray | None,
    use_rope: bool,
) -> Tensor:
    cfg = params.config
    rope_tabs = None
    if use_rope:
        T = x.shape[1]
        cos, sin = _rope_tables(T, cfg.d_model // cfg.n_heads)
        rope_tabs = (cos[:T], sin[:T])
    for i in range(n_layers):
        x = _block_forward(params, f"{scope}.h{i}", x, mask, cfg.n_heads, rope_tabs)
    return tz.layer_norm(x, params[f"{scope}.ln_out.gain"], params[f"{scope}.ln_out.bias"], LN_EPS)


def encode_batch(params: ModelParams, user_ids: np.ndarray) -> Tensor:
    """Causal windowed encoding of user symbols: (B, T) ids -> (B, T, d)."""
    cfg = params.config
    B, T = user_ids.shape
    if T > cfg.max_frames:
        raise ValueError(f"encode_batch: {T} frames exceed max_frames={cfg.max_frames}")
    x = tz.take_rows(params["audio_embed"], user_ids)
    mask = _causal_window_mask(T, cfg.window)
    x = _stack_forward(params, "enc", cfg.enc_layers, x, mask, use_rope=True)
    return x @ params["enc.proj.w"] + params["enc.proj.b"]


def encode_speech(audio_ids, params: ModelParams) -> Tensor:
    """Single-stream convenience wrapper: list of ids -> (T, d)."""
    ids = np.asarray(audio_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= params.config.audio_vocab_size):
        raise ValueError("encode_speech: audio id out of range")
    out = encode_batch(params, ids[None, :])
    return tz.reshape(out, (ids.shape[0], params.config.d_model))


def decoder_forward(params: ModelParams, h_in: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Decoder over prepared inputs: (B, T, d) -> (h, logits, ghat)."""
    cfg = params.config
    T = h_in.shape[1]
    mask = _causal_window_mask(T, cfg.window)
    h = _stack_forward(params, "dec", cfg.n_layers, h_in, mask, use_rope=True)
    logits = h @ params["head.w"]
    hidden = tz.tanh(h @ params["timing.w1"] + params["timing.b1"])
    ghat = tz.sigmoid(hidden @ params["timing.w2"] + params["timing.b2"])
    ghat = tz.reshape(ghat, (h.shape[0], T))
    return h, logits, ghat


def latent_feedback(logits, embed_table, tau: float = 1.0) -> Tensor:
    """Vocabulary-weighted embedding: softmax(logits / tau) @ E.

    Output rows live inside the convex hull of the embedding rows, one
    mixture per input row.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    weights = tz.softmax(logits * (1.0 / tau), axis=-1)
    return weights @ embed_table


def expert_forward(
    x: Tensor,
    h_txt: Tensor,
    params: ModelParams,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Bidirectional posterior encoder: (X, label embeddings) -> (h_e, W_e, Z).

    Inputs are (T, d) for a single stream or (B, T, d) batched; label
    embeddings are the unshifted per-frame agent-token embeddings.
    """
    single = x.ndim == 2
    if single:
        x = tz.reshape(x, (1,) + tuple(x.shape))
        h_txt = tz.reshape(h_txt, (1,) + tuple(h_txt.shape))
    if x.shape != h_txt.shape:
        raise ValueError(f"expert_forward: shape mismatch {x.shape} vs {h_txt.shape}")
    cfg = params.config
    B, T, d = x.shape
    if T > cfg.max_frames:
        raise ValueError(f"expert_forward: {T} frames exceed max_frames={cfg.max_frames}")
    pos = params["expert.pos"][:T]
    h = x + h_txt + pos
    mask = None if lengths is None else _padding_mask(lengths, T)
    h_e = _stack_forward(params, "expert", cfg.expert_layers, h, mask, use_rope=False)
    w_e = tz.softmax(h_e @ params["expert.proj.w"] + params["expert.proj.b"], axis=-1)
    z = w_e @ params["text_embed"]
    if single:
        h_e = tz.reshape(h_e, (T, d))
        w_e = tz.reshape(w_e, (T, cfg.text_vocab_size))
        z = tz.reshape(z, (T, d))
    return h_e, w_e, z


# -- record packing and the full teacher-forced pass ----------------------------


@dataclass
class PackedBatch:
    user: np.ndarray  # (B, T) int64, padded with <USIL>
    agent: np.ndarray  # (B, T) int64, padded with <SIL>
    g: np.ndarray  # (B, T) float32
    lengths: np.ndarray  # (B,) int64
    snr_db: list[float | None] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        T = self.user.shape[1]
        return (np.arange(T)[None, :] < self.lengths[:, None])


def pack_records(records: list[DuplexRecord]) -> PackedBatch:
    B = len(records)
    T = max(len(r) for r in records)
    user = np.zeros((B, T), dtype=np.int64)
    agent = np.zeros((B, T), dtype=np.int64)
    g = np.zeros((B, T), dtype=np.float32)
    lengths = np.zeros(B, dtype=np.int64)
    for i, r in enumerate(records):
        n = len(r)
        user[i, :n] = r.user
        agent[i, :n] = r.agent
        g[i, :n] = r.g
        lengths[i] = n
    return PackedBatch(user, agent, g, lengths, [r.snr_db for r in records])


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T, |V|)
    ghat: Tensor  # (B, T)
    hidden: Tensor  # (B, T, d)
    x: Tensor  # (B, T, d) encoder output fed to the decoder
    w_expert: Tensor | None = None  # (B, T, |V|) latent mode only
    z: Tensor | None = None  # (B, T, d) latent mode only
    carry: Tensor | None = None  # (B, T, d) inputs' feedback half


def forward_from_x(
    params: ModelParams,
    batch: PackedBatch,
    x: Tensor,
    mode: str,
    z_gate: tz.GradGate | None = None,
) -> ForwardOutput:
    """Run expert (latent mode) and decoder over prepared encoder outputs.

    z_gate, when given, wraps the latent labels on their way into the decoder
    input so a later backward pass can exclude that edge (the regularizer
    must not train the expert through the teacher-forced inputs).
    """
    if mode not in ("pretrain", "latent"):
        raise ValueError(f"forward_from_x: unknown mode '{mode}'")
    cfg = params.config
    E = params["text_embed"]
    B, T = batch.agent.shape

    w_expert = None
    z = None
    if mode == "latent":
        h_txt = tz.take_rows(E, batch.agent)
        _, w_expert, z = expert_forward(x, h_txt, params, lengths=batch.lengths)
        latent_src = z if z_gate is None else tz.grad_gate(z, z_gate)
    else:
        sil = np.full((B, T), TextVocab.SIL_ID, dtype=np.int64)
        latent_src = tz.take_rows(E, sil)

    # carry-in with the one-step shift: frame 0 boots from <SIL>, frame t
    # receives the token embedding when g[t-1] = 1, else the latent at t-1
    agent_embed = tz.take_rows(E, batch.agent)
    gmask = batch.g[:, :-1, None]
    rest = agent_embed[:, :-1] * gmask + latent_src[:, :-1] * (1.0 - gmask)
    boot = tz.broadcast_to(tz.reshape(tz.take_rows(E, np.array([TextVocab.SIL_ID])), (1, 1, cfg.d_model)), (B, 1, cfg.d_model))
    carry = tz.concat([boot, rest], axis=1)

    hidden, logits, ghat = decoder_forward(params, x + carry)
    return ForwardOutput(logits=logits, ghat=ghat, hidden=hidden, x=x,
                         w_expert=w_expert, z=z, carry=carry)


def teacher_forced_forward(record: DuplexRecord, params: ModelParams, mode: str) -> ForwardOutput:
    """Full-sequence pass over one record; latent mode also returns the
    expert weighting and latent labels. Outputs keep a leading batch axis of 1."""
    batch = pack_records([record])
    x = encode_batch(params, batch.user)
    return forward_from_x(params, batch, x, mode)


# -- incremental decoding --------------------------------------------------------


@dataclass
class StepState:
    """Per-session decoding state: layer caches for encoder and decoder, the
    frame clock, the carry-in embedding, and the dialogue phase."""

    enc_kv: list[tuple[np.ndarray, np.ndarray]]
    dec_kv: list[tuple[np.ndarray, np.ndarray]]
    frame: int
    carry: np.ndarray  # (B, d)
    speaking: np.ndarray  # (B,) bool
    armed: np.ndarray  # (B,) bool: post-<EOS> silence rule active

    @property
    def batch(self) -> int:
        return self.carry.shape[0]


def init_step_state(params: ModelParams, batch: int = 1) -> StepState:
    cfg = params.config
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    empty = lambda: (np.zeros((batch, H, 0, dh), np.float32), np.zeros((batch, H, 0, dh), np.float32))
    carry = np.repeat(params["text_embed"].data[TextVocab.SIL_ID][None, :], batch, axis=0)
    return StepState(
        enc_kv=[empty() for _ in range(cfg.enc_layers)],
        dec_kv=[empty() for _ in range(cfg.n_layers)],
        frame=0,
        carry=carry.copy(),
        speaking=np.zeros(batch, dtype=bool),
        armed=np.zeros(batch, dtype=bool),
    )


def _ln_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * gain + bias


_GELU_C_NP = np.float32(np.sqrt(2.0 / np.pi))


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C_NP * (x + 0.044715 * (x * x * x))))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _rope_row_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _block_step(
    raw: dict[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    kv: tuple[np.ndarray, np.ndarray],
    pos: int,
    n_heads: int,
    window: int,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    B, d = x.shape
    dh = d // n_heads
    cos_t, sin_t = _rope_tables(pos + 1, dh)
    cos, sin = cos_t[pos], sin_t[pos]
    a_in = _ln_np(x, raw[f"{prefix}.ln1.gain"], raw[f"{prefix}.ln1.bias"])
    q = _rope_row_np((a_in @ raw[f"{prefix}.attn.wq"]).reshape(B, n_heads, dh), cos, sin)
    k = _rope_row_np((a_in @ raw[f"{prefix}.attn.wk"]).reshape(B, n_heads, dh), cos, sin)
    v = (a_in @ raw[f"{prefix}.attn.wv"]).reshape(B, n_heads, dh)
    k_cat = np.concatenate([kv[0], k[:, :, None, :]], axis=2)
    v_cat = np.concatenate([kv[1], v[:, :, None, :]], axis=2)
    if window > 0 and k_cat.shape[2] > window:
        k_cat = k_cat[:, :, -window:]
        v_cat = v_cat[:, :, -window:]
    scores = np.einsum("bhd,bhmd->bhm", q, k_cat) / np.float32(np.sqrt(dh))
    attn = _softmax_np(scores)
    ctx = np.einsum("bhm,bhmd->bhd", attn, v_cat).reshape(B, d) @ raw[f"{prefix}.attn.wo"]
    x = x + ctx
    f_in = _ln_np(x, raw[f"{prefix}.ln2.gain"], raw[f"{prefix}.ln2.bias"])
    h = _gelu_np(f_in @ raw[f"{prefix}.ffn.w1"] + raw[f"{prefix}.ffn.b1"])
    return x + (h @ raw[f"{prefix}.ffn.w2"] + raw[f"{prefix}.ffn.b2"]), (k_cat, v_cat)


def encoder_step(params: ModelParams, state: StepState, audio_ids: np.ndarray) -> np.ndarray:
    """Consume one user frame per stream: (B,) ids -> (B, d) speech embedding."""
    cfg = params.config
    raw = params.raw()
    ids = np.asarray(audio_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.audio_vocab_size):
        raise ValueError("encoder_step: audio id out of range")
    x = raw["audio_embed"][ids]
    for i in range(cfg.enc_layers):
        x, state.enc_kv[i] = _block_step(raw, f"enc.h{i}", x, state.enc_kv[i], state.frame, cfg.n_heads, cfg.window)
    x = _ln_np(x, raw["enc.ln_out.gain"], raw["enc.ln_out.bias"])
    return x @ raw["enc.proj.w"] + raw["enc.proj.b"]


def decoder_step(
    state: StepState,
    h_in: np.ndarray,
    params: ModelParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, StepState]:
    """One decoder frame: (B, d) input -> (hidden, logits, ghat, state).

    Advances the frame clock; the caller owns carry/phase updates.
    """
    cfg = params.config
    if state.frame >= cfg.max_frames:
        raise ValueError(f"decoder_step: frame {state.frame} exceeds max_frames={cfg.max_frames}")
    raw = params.raw()
    x = h_in
    for i in range(cfg.n_layers):
        x, state.dec_kv[i] = _block_step(raw, f"dec.h{i}", x, state.dec_kv[i], state.frame, cfg.n_heads, cfg.window)
    h = _ln_np(x, raw["dec.ln_out.gain"], raw["dec.ln_out.bias"])
    logits = h @ raw["head.w"]
    hidden = np.tanh(h @ raw["timing.w1"] + raw["timing.b1"])
    ghat_logit = (hidden @ raw["timing.w2"] + raw["timing.b2"])[:, 0]
    ghat = 1.0 / (1.0 + np.exp(-ghat_logit))
    state.frame += 1
    return h, logits, ghat, state


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write config.json, manifest.json, and params.bin (little-endian f32)."""
    os.makedirs(path, exist_ok=True)
    manifest = []
    offset = 0
    names = sorted(params.tensors)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name in names:
            arr = params.tensors[name].data.astype("<f4", copy=False)
            fh.write(arr.tobytes())
            manifest.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "count": int(arr.size),
            })
            offset += arr.size * 4
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(params.config), fh, indent=1)


def load_checkpoint(path: str) -> ModelParams:
    try:
        with open(os.path.join(path, "config.json"), "r", encoding="utf-8") as fh:
            config = ModelConfig(**json.load(fh))
        with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint at {path}: {exc}") from exc

    expected = _param_shapes(config)
    tensors: dict[str, Tensor] = {}
    for entry in manifest:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter '{name}' in manifest")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: parameter '{name}' has shape {shape}, config expects {expected[name]}"
            )
        start = entry["offset"] // 4
        count = entry["count"]
        if start + count > blob.size:
            raise CheckpointError(f"{path}: blob too short for '{name}'")
        tensors[name] = Tensor(
            blob[start : start + count].reshape(shape).astype(np.float32),
            requires_grad=True,
        )
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:4]}...")
    return ModelParams(config, tensors)
