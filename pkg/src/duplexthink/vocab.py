"""Token inventories for the two synchronized channels.

The agent (text) channel and the user (audio-symbol) channel use disjoint id
spaces. Control tokens sit at fixed reserved indices so masks and the engine
state machine can hardcode them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

SIL = "<SIL>"
BOS = "<BOS>"
EOS = "<EOS>"
PAD = "<PAD>"
USIL = "<USIL>"

TASKS = ("sum", "rev", "max", "par", "copy")
TASK_MARKERS = {t: f"q_{t}" for t in TASKS}
QUERY_END = "q_end"


@dataclass(frozen=True)
class TextVocab:
    """Agent-channel tokens: 4 control tokens at indices 0-3, then the ten
    digit tokens, then a small word set for continuation dialogues."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(default_factory=dict, compare=False)

    SIL_ID = 0
    BOS_ID = 1
    EOS_ID = 2
    PAD_ID = 3

    def __post_init__(self):
        if self.tokens[:4] != (SIL, BOS, EOS, PAD):
            raise ValueError("TextVocab: control tokens must occupy indices 0-3")
        if len(self.tokens) < 8:
            raise ValueError("TextVocab: need at least 8 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("TextVocab: duplicate surface forms")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, surface: str) -> int:
        return self.index[surface]

    def surface(self, token_id: int) -> str:
        return self.tokens[token_id]

    def digit_id(self, d: int) -> int:
        return self.index[f"d{d}"]

    def word_id(self, w: int) -> int:
        return self.index[f"w{w}"]

    @property
    def control_ids(self) -> tuple[int, int, int, int]:
        return (self.SIL_ID, self.BOS_ID, self.EOS_ID, self.PAD_ID)


@dataclass(frozen=True)
class AudioVocab:
    """User-channel symbols: silence at index 0, digit sounds, task markers,
    query terminator, and filler sounds for continuation speech."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(default_factory=dict, compare=False)

    USIL_ID = 0

    def __post_init__(self):
        if self.tokens[0] != USIL:
            raise ValueError("AudioVocab: <USIL> must sit at index 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("AudioVocab: duplicate surface forms")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, surface: str) -> int:
        return self.index[surface]

    def surface(self, symbol_id: int) -> str:
        return self.tokens[symbol_id]

    def digit_id(self, d: int) -> int:
        return self.index[f"a{d}"]

    def marker_id(self, task: str) -> int:
        return self.index[TASK_MARKERS[task]]

    def filler_id(self, k: int) -> int:
        return self.index[f"f{k}"]

    @property
    def query_end_id(self) -> int:
        return self.index[QUERY_END]


@dataclass(frozen=True)
class Vocabs:
    text: TextVocab
    audio: AudioVocab
    n_words: int
    n_fillers: int


def build_vocabs(n_words: int = 18, n_fillers: int = 7) -> Vocabs:
    return Vocabs(
        text=build_text_vocab(n_words),
        audio=build_audio_vocab(n_fillers),
        n_words=n_words,
        n_fillers=n_fillers,
    )


def build_text_vocab(n_words: int = 18) -> TextVocab:
    tokens = [SIL, BOS, EOS, PAD]
    tokens += [f"d{i}" for i in range(10)]
    tokens += [f"w{i}" for i in range(n_words)]
    return TextVocab(tuple(tokens))


def build_audio_vocab(n_fillers: int = 7) -> AudioVocab:
    tokens = [USIL]
    tokens += [f"a{i}" for i in range(10)]
    tokens += [TASK_MARKERS[t] for t in TASKS]
    tokens += [QUERY_END]
    tokens += [f"f{i}" for i in range(n_fillers)]
    return AudioVocab(tuple(tokens))
