"""RL data curation: Monte Carlo pass rates, difficulty filters and
embedding-based contamination removal.

Boundaries follow the operators literally: a seed is kept when
``0.25 <= pass < 1``; a synthesised variant is kept when
``seed_pass - 0.25 >= variant_pass >= 0.25``; a training clip is
discarded when its cosine similarity to any benchmark clip is ``> tau``.
Rate comparisons are done on exact rationals so grid values such as
0.55 - 0.25 are not lost to binary rounding.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from gamma_core.grpo import LETTERS, RewardSpec, ToyTask, compute_reward

log = logging.getLogger(__name__)

MIN_PASS = 0.25
MAX_PASS = 1.0  # exclusive
VARIANT_MARGIN = 0.25
TAU = 0.95
DEFAULT_ROLLOUTS = 64


def stable_key(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def exact(x) -> Fraction:
    """Rational value of a rate; floats are read through their shortest repr."""
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    return Fraction(repr(float(x)))


# ---------------------------------------------------------------- records


@dataclass
class QuestionCandidate:
    id: str
    prompt: str
    choices: list[str]
    gold: str
    origin: str = "seed"  # or "synthesized-from:<id>"
    features: list[float] | None = None
    embedding: list[float] | None = None

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError(f"{self.id}: need at least two choices")
        if self.gold not in self.choices:
            raise ValueError(f"{self.id}: gold {self.gold!r} not among choices {self.choices}")
        if self.origin != "seed" and not self.origin.startswith("synthesized-from:"):
            raise ValueError(f"{self.id}: bad origin {self.origin!r}")

    @property
    def parent(self) -> str | None:
        if self.origin == "seed":
            return None
        return self.origin.split(":", 1)[1]

    def to_task(self) -> ToyTask:
        if self.features is not None:
            x = np.asarray(self.features, dtype=np.float64)
        else:
            x = np.random.default_rng(stable_key(self.prompt)).normal(size=len(self.choices))
        if x.shape != (len(self.choices),):
            raise ValueError(f"{self.id}: features must have one entry per choice")
        return ToyTask(self.id, x, self.choices.index(self.gold))

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "prompt": self.prompt,
            "choices": list(self.choices),
            "gold": self.gold,
            "origin": self.origin,
        }
        if self.features is not None:
            rec["features"] = [float(v) for v in self.features]
        if self.embedding is not None:
            rec["embedding"] = [float(v) for v in self.embedding]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "QuestionCandidate":
        known = {"id", "prompt", "choices", "gold", "origin", "features", "embedding"}
        extra = set(rec) - known
        if extra:
            raise ValueError(f"unknown candidate fields {sorted(extra)}")
        return cls(
            id=str(rec["id"]),
            prompt=str(rec.get("prompt", "")),
            choices=list(rec["choices"]),
            gold=str(rec["gold"]),
            origin=str(rec.get("origin", "seed")),
            features=rec.get("features"),
            embedding=rec.get("embedding"),
        )


def read_pool(path: str | Path) -> list[QuestionCandidate]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(QuestionCandidate.from_record(json.loads(line)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_pool(pool: Iterable[QuestionCandidate], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for c in pool:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- pass estimation


class Responder(Protocol):
    def respond(self, task: ToyTask, rng: np.random.Generator) -> str: ...


@dataclass(frozen=True)
class PassEstimate:
    question_id: str
    n: int
    k: int

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.k <= self.n:
            raise ValueError(f"invalid pass estimate k={self.k}, n={self.n}")

    @property
    def pass_rate(self) -> float:
        return self.k / self.n

    @property
    def exact_rate(self) -> Fraction:
        return Fraction(self.k, self.n)


class FixedRatePolicy:
    """Answers correctly (and tagged) with probability ``p``."""

    def __init__(self, p: float, spec: RewardSpec = RewardSpec()):
        self.p = p
        self.spec = spec

    def respond(self, task: ToyTask, rng: np.random.Generator) -> str:
        if rng.random() < self.p:
            return self.spec.wrap(task.gold_letter)
        wrong = [c for c in task.choices if c != task.gold_letter]
        return self.spec.wrap(wrong[rng.integers(len(wrong))])


class UniformPolicy:
    """Picks a tagged letter uniformly at random."""

    def respond(self, task: ToyTask, rng: np.random.Generator) -> str:
        return RewardSpec().wrap(task.choices[rng.integers(task.n_choices)])


def estimate_pass(
    question: QuestionCandidate | ToyTask,
    policy: Responder,
    n: int = DEFAULT_ROLLOUTS,
    seed: int = 0,
    spec: RewardSpec = RewardSpec(),
) -> PassEstimate:
    if n < 1:
        raise ValueError("n must be >= 1")
    task = question.to_task() if isinstance(question, QuestionCandidate) else question
    rng = np.random.default_rng([seed, stable_key(task.id)])
    k = sum(
        compute_reward(policy.respond(task, rng), task.gold_letter, spec).accuracy == 1.0
        for _ in range(n)
    )
    return PassEstimate(task.id, n, int(k))


# ---------------------------------------------------------------- filters


def classify_pass(rate, min_pass=MIN_PASS, max_pass=MAX_PASS) -> str:
    r = exact(rate)
    if r >= exact(max_pass):
        return "too-easy"
    if r < exact(min_pass):
        return "too-hard"
    return "kept"


@dataclass
class SeedSelection:
    kept: list[PassEstimate] = field(default_factory=list)
    rejected: list[tuple[PassEstimate, str]] = field(default_factory=list)


def select_seeds(
    estimates: Iterable[PassEstimate], min_pass=MIN_PASS, max_pass=MAX_PASS
) -> SeedSelection:
    sel = SeedSelection()
    for est in estimates:
        verdict = classify_pass(est.exact_rate, min_pass, max_pass)
        if verdict == "kept":
            sel.kept.append(est)
        else:
            sel.rejected.append((est, verdict))
    return sel


@dataclass(frozen=True)
class VariantVerdict:
    keep: bool
    reason: str


def retain_variant(seed_pass, variant_pass, margin=VARIANT_MARGIN, floor=MIN_PASS) -> VariantVerdict:
    s, v = exact(seed_pass), exact(variant_pass)
    if not (0 <= s <= 1 and 0 <= v <= 1):
        raise ValueError("pass rates must lie in [0, 1]")
    lo, hi = exact(floor), s - exact(margin)
    if hi < lo:
        return VariantVerdict(False, "empty-window")
    if v < lo:
        return VariantVerdict(False, "too-hard")
    if v > hi:
        return VariantVerdict(False, "not-harder")
    return VariantVerdict(True, "kept")


# ---------------------------------------------------------------- contamination


@dataclass(frozen=True)
class ClipEmbedding:
    clip_id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError(f"{self.clip_id}: embedding must be a finite 1-d vector")
        if not np.linalg.norm(v) > 0:
            raise ValueError(f"{self.clip_id}: zero-norm embedding")
        object.__setattr__(self, "vector", v)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class DiscardEntry:
    train_id: str
    bench_id: str
    similarity: float


@dataclass
class DedupResult:
    retained: list[ClipEmbedding]
    discarded: list[DiscardEntry]


def _unit_rows(clips: list[ClipEmbedding]) -> np.ndarray:
    m = np.stack([c.vector for c in clips])
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def dedup_contamination(
    train: list[ClipEmbedding], bench: list[ClipEmbedding], tau: float = TAU
) -> DedupResult:
    if not train or not bench:
        return DedupResult(list(train), [])
    dims = {c.vector.shape[0] for c in train} | {c.vector.shape[0] for c in bench}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions differ: {sorted(dims)}")
    # fixed bench order so the reported partner does not depend on input order
    bench = sorted(bench, key=lambda c: c.clip_id)
    sims = _unit_rows(train) @ _unit_rows(bench).T
    retained, discarded = [], []
    for i, clip in enumerate(train):
        j = int(np.argmax(sims[i]))
        if sims[i, j] > tau:
            discarded.append(DiscardEntry(clip.clip_id, bench[j].clip_id, float(sims[i, j])))
        else:
            retained.append(clip)
    return DedupResult(retained, discarded)


def synthetic_embedding(key: str, dim: int = 32) -> np.ndarray:
    """Deterministic stand-in for a frozen audio encoder's clip embedding."""
    return np.random.default_rng(stable_key(key)).normal(size=dim)


def candidate_embedding(c: QuestionCandidate, dim: int = 32) -> ClipEmbedding:
    vec = c.embedding if c.embedding is not None else synthetic_embedding(c.prompt or c.id, dim)
    return ClipEmbedding(c.id, np.asarray(vec, dtype=np.float64))


def make_contamination_corpus(
    seed: int, n_dups: int = 20, n_distractors: int = 200, n_bench: int = 20, dim: int = 64
) -> tuple[list[ClipEmbedding], list[ClipEmbedding], set[str]]:
    """Bench clips plus a train set with planted near-duplicates
    (similarity > 0.95) and distractors (similarity < 0.9 to every bench clip).

    Returns (train, bench, ids of planted duplicates).
    """
    rng = np.random.default_rng(seed)
    bench_m = rng.normal(size=(n_bench, dim))
    unit_b = bench_m / np.linalg.norm(bench_m, axis=1, keepdims=True)
    bench = [ClipEmbedding(f"bench-{j}", bench_m[j]) for j in range(n_bench)]
    train, planted = [], set()
    for i in range(n_dups):
        src = unit_b[i % n_bench]
        while True:
            v = src + 0.02 * rng.normal(size=dim)
            if float(np.max(unit_b @ (v / np.linalg.norm(v)))) > 0.96:
                break
        train.append(ClipEmbedding(f"dup-{i}", v * rng.uniform(0.5, 2.0)))
        planted.add(f"dup-{i}")
    for i in range(n_distractors):
        while True:
            v = rng.normal(size=dim)
            if float(np.max(unit_b @ (v / np.linalg.norm(v)))) < 0.9:
                break
        train.append(ClipEmbedding(f"train-{i}", v))
    order = rng.permutation(len(train))
    return [train[k] for k in order], bench, planted


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class CurationThresholds:
    min_pass: float = MIN_PASS
    max_pass: float = MAX_PASS
    variant_margin: float = VARIANT_MARGIN
    tau: float = TAU
    rollouts: int = DEFAULT_ROLLOUTS

    def __post_init__(self):
        if not 0.0 <= self.min_pass <= 1.0:
            raise ValueError("min_pass must lie in [0, 1]")
        if not 0.0 < self.max_pass <= 1.0:
            raise ValueError("max_pass must lie in (0, 1]")
        if not 0.0 <= self.variant_margin <= 1.0:
            raise ValueError("variant_margin must lie in [0, 1]")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")
        if self.rollouts < 1:
            raise ValueError("rollouts must be >= 1")


@dataclass
class CurationResult:
    kept: list[QuestionCandidate]
    log: list[dict]
    estimates: dict[str, PassEstimate]


def _entry(qid, stage, verdict, reason, **measured) -> dict:
    return {"id": qid, "stage": stage, "verdict": verdict, "reason": reason, "measured": measured}


def run_curation(
    pool: list[QuestionCandidate],
    policy: Responder,
    seed: int,
    thresholds: CurationThresholds = CurationThresholds(),
    bench: list[ClipEmbedding] | None = None,
) -> CurationResult:
    """Dedup against the benchmark, then the seed filter, then the variant filter."""
    ids = [c.id for c in pool]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate candidate ids in pool")
    entries: list[dict] = []
    alive = list(pool)

    if bench:
        dims = {b.vector.shape[0] for b in bench}
        dim = dims.pop() if len(dims) == 1 else 32
        train = [candidate_embedding(c, dim) for c in alive]
        res = dedup_contamination(train, bench, thresholds.tau)
        dropped = {d.train_id: d for d in res.discarded}
        for d in res.discarded:
            entries.append(
                _entry(d.train_id, "dedup", "rejected", "contaminated", bench_id=d.bench_id, similarity=d.similarity)
            )
        alive = [c for c in alive if c.id not in dropped]

    estimates: dict[str, PassEstimate] = {}
    kept: list[QuestionCandidate] = []
    kept_seed_ids: set[str] = set()
    for c in alive:
        if c.parent is not None:
            continue
        est = estimate_pass(c, policy, thresholds.rollouts, seed)
        estimates[c.id] = est
        verdict = classify_pass(est.exact_rate, thresholds.min_pass, thresholds.max_pass)
        if verdict == "kept":
            kept.append(c)
            kept_seed_ids.add(c.id)
            entries.append(_entry(c.id, "seed-filter", "kept", "moderate", pass_rate=est.pass_rate, k=est.k, n=est.n))
        else:
            entries.append(_entry(c.id, "seed-filter", "rejected", verdict, pass_rate=est.pass_rate, k=est.k, n=est.n))

    for c in alive:
        if c.parent is None:
            continue
        if c.parent not in kept_seed_ids:
            entries.append(_entry(c.id, "variant-filter", "rejected", "parent-not-kept", parent=c.parent))
            continue
        est = estimate_pass(c, policy, thresholds.rollouts, seed)
        estimates[c.id] = est
        parent = estimates[c.parent]
        v = retain_variant(parent.exact_rate, est.exact_rate, thresholds.variant_margin, thresholds.min_pass)
        entries.append(
            _entry(
                c.id,
                "variant-filter",
                "kept" if v.keep else "rejected",
                v.reason,
                pass_rate=est.pass_rate,
                seed_pass_rate=parent.pass_rate,
                parent=c.parent,
            )
        )
        if v.keep:
            kept.append(c)
    log.info("curation kept %d of %d candidates", len(kept), len(pool))
    return CurationResult(kept, entries, estimates)


def make_pool(
    seed: int, n_seeds: int = 24, variants_per_seed: int = 2, n_choices: int = 4
) -> list[QuestionCandidate]:
    """Synthetic candidate pool: seeds of mixed difficulty, each with
    variants that keep the answer but shrink the gold feature's lead."""
    rng = np.random.default_rng([seed, 0xC0A7])
    letters = list(LETTERS[:n_choices])
    pool = []
    for i in range(n_seeds):
        gold = int(rng.integers(n_choices))
        base = rng.normal(size=n_choices)
        lead = rng.uniform(-0.5, 4.0)
        x = base.copy()
        x[gold] = np.max(np.delete(base, gold)) + lead
        sid = f"q{i:03d}"
        pool.append(
            QuestionCandidate(sid, f"synthetic question {sid}", letters, letters[gold], "seed", x.tolist())
        )
        for j in range(variants_per_seed):
            shrink = rng.uniform(0.3, 0.9)
            xv = base.copy()
            xv[gold] = np.max(np.delete(base, gold)) + lead * (1 - shrink)
            vid = f"{sid}-v{j}"
            pool.append(
                QuestionCandidate(
                    vid, f"synthetic variant {vid}", letters, letters[gold], f"synthesized-from:{sid}", xv.tolist()
                )
            )
    return pool
