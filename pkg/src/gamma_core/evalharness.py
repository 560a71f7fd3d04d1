"""Benchmark scoring.

* multiple-choice answer extraction and hierarchical accuracy tables
  (leaf categories, every branch above them, overall);
* split-size validation for a MusicBench-style manifest;
* segment-level structure F1 with one-to-one same-label matching at an
  IoU threshold.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from gamma_core.hungarian import hungarian

MUSICBENCH_SPLITS = {"Global": 2741, "Temporal": 998}
MUSICBENCH_TOTAL = 3739

STRUCTURE_LABELS = ("intro", "verse", "chorus", "bridge", "outro", "silence", "instrumental")

_TAG = re.compile(r"<answer>(.*?)</answer>", re.S)


# ---------------------------------------------------------------- answer extraction


def _letter_pattern(letters: str) -> str:
    return "[" + re.escape(letters) + "]"


def extract_answer(response: str, letters: str = "ABCD") -> str | None:
    """Return the chosen letter, or ``None`` if nothing parseable is found.

    A tagged ``<answer>X</answer>`` wins.  Otherwise: an explicit
    "answer is X" / "answer: X", then a parenthesised "(X)", then the first
    standalone choice letter.
    """
    if not response:
        return None
    L = _letter_pattern(letters)
    alone = rf"(?<![A-Za-z0-9])({L})(?![A-Za-z0-9])"
    for span in _TAG.findall(response):
        s = span.strip()
        if len(s) == 1 and s.upper() in letters:
            return s.upper()
        m = re.search(alone, s)
        if m:
            return m.group(1)
    for pattern in (
        rf"answer\s*(?:is|:)?\s*\(?({L})\b",
        rf"\(({L})\)",
        alone,
    ):
        m = re.search(pattern, response, flags=re.I if pattern.startswith("answer") else 0)
        if m:
            letter = m.group(1).upper()
            if letter in letters:
                return letter
    return None


# ---------------------------------------------------------------- questions & scoring


@dataclass(frozen=True)
class BenchQuestion:
    id: str
    category: tuple[str, ...]
    prompt: str
    choices: tuple[str, ...]
    gold: str

    def __post_init__(self):
        if not self.category:
            raise ValueError(f"{self.id}: empty category path")
        if self.gold not in self.choices:
            raise ValueError(f"{self.id}: gold {self.gold!r} not among {self.choices}")

    @property
    def letters(self) -> str:
        return "".join(self.choices)

    @classmethod
    def from_record(cls, rec: dict) -> "BenchQuestion":
        cat = rec["category"]
        if isinstance(cat, str):
            cat = cat.split("/")
        return cls(
            str(rec["id"]),
            tuple(cat),
            str(rec.get("prompt", "")),
            tuple(rec.get("choices", "ABCD")),
            str(rec["gold"]),
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "category": list(self.category),
            "prompt": self.prompt,
            "choices": list(self.choices),
            "gold": self.gold,
        }


@dataclass
class Cell:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class ScoreReport:
    leaves: dict[tuple[str, ...], Cell] = field(default_factory=dict)
    branches: dict[tuple[str, ...], Cell] = field(default_factory=dict)
    overall: Cell = field(default_factory=Cell)

    @property
    def macro_accuracy(self) -> float:
        """Unweighted mean over leaf categories."""
        if not self.leaves:
            return 0.0
        return sum(c.accuracy for c in self.leaves.values()) / len(self.leaves)

    def accuracy(self, *path: str) -> float:
        if not path:
            return self.overall.accuracy
        key = tuple(path)
        cell = self.leaves.get(key) or self.branches.get(key)
        if cell is None:
            raise KeyError(path)
        return cell.accuracy

    def to_record(self) -> dict:
        def rows(cells):
            return [
                {"category": list(k), "correct": c.correct, "total": c.total, "accuracy": c.accuracy}
                for k, c in sorted(cells.items())
            ]

        return {
            "overall": {"correct": self.overall.correct, "total": self.overall.total, "accuracy": self.overall.accuracy},
            "macro_accuracy": self.macro_accuracy,
            "branches": rows(self.branches),
            "leaves": rows(self.leaves),
        }

    def to_table(self) -> str:
        """Aligned plain-text table, percentages to one decimal."""
        lines = []
        keys = sorted(set(self.leaves) | set(self.branches))
        width = max([2 * (len(k) - 1) + len(k[-1]) for k in keys] + [len("overall (macro)")])
        lines.append(f"{'category'.ljust(width)}  {'acc%':>6}  {'correct':>7}  {'total':>6}")
        for k in keys:
            c = self.leaves.get(k) or self.branches[k]
            name = "  " * (len(k) - 1) + k[-1]
            lines.append(f"{name.ljust(width)}  {display_pct(c.accuracy):>6}  {c.correct:>7}  {c.total:>6}")
        o = self.overall
        lines.append(f"{'overall'.ljust(width)}  {display_pct(o.accuracy):>6}  {o.correct:>7}  {o.total:>6}")
        lines.append(f"{'overall (macro)'.ljust(width)}  {display_pct(self.macro_accuracy):>6}")
        return "\n".join(lines) + "\n"


def display_pct(acc: float) -> str:
    return f"{100.0 * acc:.1f}"


def score(questions: Iterable[BenchQuestion], responses: dict[str, str]) -> ScoreReport:
    """Missing responses count as wrong; duplicate question ids are an error."""
    questions = list(questions)
    dupes = [k for k, n in Counter(q.id for q in questions).items() if n > 1]
    if dupes:
        raise ValueError(f"duplicate question ids: {sorted(dupes)[:5]}")
    report = ScoreReport()
    for q in questions:
        ok = extract_answer(responses.get(q.id, ""), q.letters) == q.gold
        for depth in range(1, len(q.category) + 1):
            key = q.category[:depth]
            table = report.leaves if depth == len(q.category) else report.branches
            cell = table.setdefault(key, Cell())
            cell.total += 1
            cell.correct += ok
        report.overall.total += 1
        report.overall.correct += ok
    clash = set(report.leaves) & set(report.branches)
    if clash:
        raise ValueError(f"category paths used both as leaf and branch: {sorted(clash)[:3]}")
    return report


@dataclass
class ManifestCheck:
    ok: bool
    counts: dict[str, int]
    problems: list[str]


def validate_manifest(
    questions: Iterable[BenchQuestion],
    expected: dict[str, int] = MUSICBENCH_SPLITS,
    total: int | None = MUSICBENCH_TOTAL,
) -> ManifestCheck:
    """Compare top-level category sizes with the published split sizes."""
    questions = list(questions)
    counts = Counter(q.category[0] for q in questions)
    problems = []
    for split, n in expected.items():
        if counts.get(split, 0) != n:
            problems.append(f"{split}: expected {n} questions, found {counts.get(split, 0)}")
    for split in counts:
        if split not in expected:
            problems.append(f"unexpected top-level category {split!r}")
    if total is not None and len(questions) != total:
        problems.append(f"total: expected {total} questions, found {len(questions)}")
    return ManifestCheck(not problems, dict(counts), problems)


# ---------------------------------------------------------------- structure F1


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: str


@dataclass(frozen=True)
class SegmentAnnotation:
    intervals: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(float(s[0]), float(s[1]), str(s[2])) for s in self.intervals)
        for s in segs:
            if not s.start < s.end:
                raise ValueError(f"segment {s} has start >= end")
            if s.label not in STRUCTURE_LABELS:
                raise ValueError(f"segment label {s.label!r} is not one of {STRUCTURE_LABELS}")
        for a, b in zip(segs, segs[1:]):
            if b.start < a.end:
                raise ValueError(f"overlapping or unsorted segments {a} and {b}")
        object.__setattr__(self, "intervals", segs)

    def __len__(self) -> int:
        return len(self.intervals)


_REMAP_PREFIXES = (
    ("intro", "intro"),
    ("verse", "verse"),
    ("prechorus", "verse"),
    ("pre-chorus", "verse"),
    ("chorus", "chorus"),
    ("refrain", "chorus"),
    ("bridge", "bridge"),
    ("break", "bridge"),
    ("transition", "bridge"),
    ("outro", "outro"),
    ("end", "outro"),
    ("coda", "outro"),
    ("fade", "outro"),
    ("silence", "silence"),
    ("inst", "instrumental"),
    ("solo", "instrumental"),
    ("interlude", "instrumental"),
)


def remap_label(raw: str) -> str:
    """Map a raw structure label onto the seven categories by prefix
    (case-insensitive, digits and whitespace ignored)."""
    key = re.sub(r"[\s\d_]+", "", raw.lower())
    for prefix, label in _REMAP_PREFIXES:
        if key.startswith(prefix):
            return label
    raise ValueError(f"cannot map structure label {raw!r}")


def iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


@dataclass(frozen=True)
class StructureScore:
    precision: float
    recall: float
    f1: float
    matches: int


def eligible_iou(pred: SegmentAnnotation, truth: SegmentAnnotation, threshold: float = 0.5):
    """IoU matrix with cross-label and below-threshold pairs set to ``None``."""
    return [
        [iou(p, t) if p.label == t.label and iou(p, t) >= threshold else None for t in truth.intervals]
        for p in pred.intervals
    ]


def structure_f1(
    pred: SegmentAnnotation, truth: SegmentAnnotation, iou_threshold: float = 0.5
) -> StructureScore:
    """Segment F1 under a one-to-one same-label matching.

    The assignment maximises the number of pairs with IoU >= threshold,
    breaking ties by total IoU: each eligible pair weighs ``M + IoU`` with
    ``M`` larger than any achievable IoU sum.
    """
    n, m = len(pred), len(truth)
    if n == 0 and m == 0:
        return StructureScore(1.0, 1.0, 1.0, 0)
    if n == 0 or m == 0:
        return StructureScore(0.0, 0.0, 0.0, 0)
    elig = eligible_iou(pred, truth, iou_threshold)
    big = min(n, m) + 1.0
    cost = [[-(big + x) if x is not None else 0.0 for x in row] for row in elig]
    assignment = hungarian(cost)
    matches = sum(1 for i, j in enumerate(assignment) if j is not None and elig[i][j] is not None)
    precision, recall = matches / n, matches / m
    # equals 2PR / (P + R) with a single rounding
    f1 = 2 * matches / (n + m)
    return StructureScore(precision, recall, f1, matches)


def corpus_structure_f1(pairs: Iterable[tuple[SegmentAnnotation, SegmentAnnotation]], iou_threshold: float = 0.5) -> float:
    """Macro average of per-track F1."""
    scores = [structure_f1(p, t, iou_threshold).f1 for p, t in pairs]
    return sum(scores) / len(scores) if scores else 0.0


# ---------------------------------------------------------------- file helpers


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def load_questions(path) -> list[BenchQuestion]:
    return [BenchQuestion.from_record(r) for r in read_jsonl(path)]


def load_responses(path) -> dict[str, str]:
    out = {}
    for r in read_jsonl(path):
        if r["id"] in out:
            raise ValueError(f"duplicate response for {r['id']!r}")
        out[str(r["id"])] = str(r.get("response", ""))
    return out


def load_annotations(path) -> dict[str, SegmentAnnotation]:
    out = {}
    for r in read_jsonl(path):
        out[str(r["track"])] = SegmentAnnotation(tuple(Segment(float(s), float(e), str(l)) for s, e, l in r["intervals"]))
    return out


def score_structure_files(pred_path, truth_path, iou_threshold: float = 0.5) -> dict:
    pred = load_annotations(pred_path)
    truth = load_annotations(truth_path)
    tracks = []
    for track in sorted(truth):
        p = pred.get(track, SegmentAnnotation(()))
        s = structure_f1(p, truth[track], iou_threshold)
        tracks.append({"track": track, "precision": s.precision, "recall": s.recall, "f1": s.f1, "matches": s.matches})
    macro = sum(t["f1"] for t in tracks) / len(tracks) if tracks else 0.0
    return {"tracks": tracks, "macro_f1": macro, "iou_threshold": iou_threshold}
