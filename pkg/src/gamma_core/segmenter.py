"""Full-length audio token budgeting.

Audio is cut into 30 s chunks of 750 tokens each (25 tokens/s).  A final
partial chunk gets a proportional count, rounded half-up with a floor of
one token; nothing is padded.  The assembled LLM input wraps the audio
tokens in a pair of reserved boundary ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

CHUNK_SECONDS = 30.0
TOKENS_PER_CHUNK = 750
TOKENS_PER_SECOND = TOKENS_PER_CHUNK / CHUNK_SECONDS

# reserved boundary ids; audio and text ids must avoid this range
BEGIN_AUDIO = 0
END_AUDIO = 1
RESERVED_IDS = frozenset({BEGIN_AUDIO, END_AUDIO})


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClipMeta:
    duration: float
    sample_id: str = "clip"

    def __post_init__(self):
        if not math.isfinite(self.duration) or self.duration < 0:
            raise LayoutError(f"duration must be finite and >= 0, got {self.duration!r}")


@dataclass(frozen=True)
class Chunk:
    start: float
    end: float
    tokens: int


@dataclass(frozen=True)
class TokenLayout:
    sample_id: str
    duration: float
    chunks: tuple[Chunk, ...] = field(default_factory=tuple)

    @property
    def total_audio_tokens(self) -> int:
        return sum(c.tokens for c in self.chunks)

    @property
    def begin_audio_index(self) -> int:
        return 0

    @property
    def end_audio_index(self) -> int:
        return self.total_audio_tokens + 1

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "duration": self.duration,
            "chunks": [[c.start, c.end, c.tokens] for c in self.chunks],
            "total_audio_tokens": self.total_audio_tokens,
            "begin_audio_index": self.begin_audio_index,
            "end_audio_index": self.end_audio_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TokenLayout":
        chunks = tuple(Chunk(float(s), float(e), int(t)) for s, e, t in rec["chunks"])
        layout = cls(str(rec["sample_id"]), float(rec["duration"]), chunks)
        if "total_audio_tokens" in rec and rec["total_audio_tokens"] != layout.total_audio_tokens:
            raise LayoutError(f"{layout.sample_id}: total_audio_tokens disagrees with chunk list")
        return layout


@dataclass(frozen=True)
class StageBudget:
    stage: int
    max_audio_seconds: float
    max_tokens: int

    def __post_init__(self):
        expected = self.max_audio_seconds / CHUNK_SECONDS * TOKENS_PER_CHUNK
        if self.max_tokens != expected:
            raise ValueError(
                f"stage {self.stage}: max_tokens {self.max_tokens} != {expected:g} implied by "
                f"{self.max_audio_seconds:g} s"
            )


STAGE_BUDGETS = {
    1: StageBudget(1, 60.0, 1500),
    2: StageBudget(2, 300.0, 7500),
    3: StageBudget(3, 120.0, 3000),
}


def exact_seconds(seconds) -> Fraction:
    """Durations are read as the decimal their shortest repr shows, so
    2.3 s means 23/10 s and 25 * 2.3 = 57.5 rounds up to 58."""
    if isinstance(seconds, (Fraction, int)):
        return Fraction(seconds)
    return Fraction(repr(float(seconds)))


def partial_chunk_tokens(seconds) -> int:
    """Tokens for a trailing chunk shorter than 30 s (half-up, min 1)."""
    r = exact_seconds(seconds)
    if r <= 0:
        return 0
    return max(1, math.floor(r * int(TOKENS_PER_SECOND) + Fraction(1, 2)))


def plan_layout(meta: AudioClipMeta) -> TokenLayout:
    d = exact_seconds(meta.duration)
    n_full = math.floor(d / int(CHUNK_SECONDS))
    chunks = [
        Chunk(i * CHUNK_SECONDS, (i + 1) * CHUNK_SECONDS, TOKENS_PER_CHUNK) for i in range(n_full)
    ]
    start = n_full * int(CHUNK_SECONDS)
    remainder = d - start
    if remainder > 0:
        chunks.append(
            Chunk(float(start), float(meta.duration), min(TOKENS_PER_CHUNK, partial_chunk_tokens(remainder)))
        )
    return TokenLayout(meta.sample_id, float(meta.duration), tuple(chunks))


def audio_tokens_for(duration: float) -> int:
    return plan_layout(AudioClipMeta(duration)).total_audio_tokens


def assemble_sequence(
    layout: TokenLayout, audio_tokens: list[int], text_tokens: list[int]
) -> list[int]:
    """``[BEGIN_AUDIO] + audio + [END_AUDIO] + text``."""
    if len(audio_tokens) != layout.total_audio_tokens:
        raise LayoutError(
            f"{layout.sample_id}: got {len(audio_tokens)} audio tokens, layout expects "
            f"{layout.total_audio_tokens}"
        )
    for kind, toks in (("audio", audio_tokens), ("text", text_tokens)):
        clash = RESERVED_IDS.intersection(toks)
        if clash:
            raise LayoutError(f"{kind} tokens collide with reserved boundary ids {sorted(clash)}")
    return [BEGIN_AUDIO, *audio_tokens, END_AUDIO, *text_tokens]


def audio_region(sequence: list[int]) -> list[int]:
    """Inverse of the audio half of :func:`assemble_sequence`."""
    if not sequence or sequence[0] != BEGIN_AUDIO:
        raise LayoutError("sequence does not start with BEGIN_AUDIO")
    end = sequence.index(END_AUDIO, 1)
    return sequence[1:end]


@dataclass(frozen=True)
class BudgetVerdict:
    fits: bool
    layout: TokenLayout
    dropped_chunks: int = 0

    @property
    def truncated(self) -> bool:
        return not self.fits


def enforce_budget(layout: TokenLayout, budget: StageBudget) -> BudgetVerdict:
    """Drop whole trailing chunks until the layout fits the stage cap."""
    if layout.total_audio_tokens <= budget.max_tokens:
        return BudgetVerdict(True, layout)
    chunks = list(layout.chunks)
    total = layout.total_audio_tokens
    dropped = 0
    while chunks and total > budget.max_tokens:
        total -= chunks.pop().tokens
        dropped += 1
    return BudgetVerdict(False, replace(layout, chunks=tuple(chunks)), dropped)
