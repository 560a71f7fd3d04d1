import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gamma_core.evalharness import (
    MUSICBENCH_SPLITS,
    MUSICBENCH_TOTAL,
    STRUCTURE_LABELS,
    BenchQuestion,
    Segment,
    SegmentAnnotation,
    corpus_structure_f1,
    eligible_iou,
    extract_answer,
    iou,
    remap_label,
    score,
    structure_f1,
    validate_manifest,
)

# ---------------------------------------------------------------- answer extraction


@pytest.mark.parametrize(
    "text, expected",
    [
        ("<answer>C</answer>", "C"),
        ("<answer> d </answer>", "D"),
        ("I think <answer>(B) guitar</answer>", "B"),
        ("The answer is (B) because the tempo rises", "B"),
        ("Answer: c", "C"),
        ("A slow ballad; the correct choice is (D)", "D"),
        ("B", "B"),
        ("Option B seems right", "B"),
        ("no idea", None),
        ("", None),
        ("<answer>E</answer>", None),
        ("ABBA is a band", None),
    ],
)
def test_extract_answer(text, expected):
    assert extract_answer(text) == expected


@given(st.text(max_size=40))
def test_extract_idempotent(text):
    first = extract_answer(text)
    if first is not None:
        assert extract_answer(first) == first
        assert extract_answer(f"<answer>{first}</answer>") == first


def test_extract_respects_letter_set():
    assert extract_answer("<answer>E</answer>", letters="ABCDE") == "E"
    assert extract_answer("(E)", letters="ABCD") is None


# ---------------------------------------------------------------- hierarchical scoring


def q(i, path, gold="A"):
    return BenchQuestion(f"q{i}", tuple(path.split("/")), "?", ("A", "B", "C", "D"), gold)


FIXTURE = [
    q(0, "Global/Genre"),
    q(1, "Global/Genre"),
    q(2, "Global/Genre"),
    q(3, "Global/Mood"),
    q(4, "Temporal/Order/Start"),
    q(5, "Temporal/Order/Start"),
    q(6, "Temporal/Order/End"),
    q(7, "Temporal/Count"),
]
RESPONSES = {
    "q0": "<answer>A</answer>",
    "q1": "<answer>B</answer>",
    "q2": "(A)",
    "q3": "nothing",
    "q4": "A",
    "q6": "The answer is A",
    "q7": "<answer>A</answer>",
}


def test_hand_built_fixture():
    rep = score(FIXTURE, RESPONSES)
    assert (rep.leaves[("Global", "Genre")].correct, rep.leaves[("Global", "Genre")].total) == (2, 3)
    assert rep.accuracy("Global", "Mood") == 0.0
    assert rep.accuracy("Global") == 2 / 4
    assert rep.accuracy("Temporal", "Order", "Start") == 1 / 2
    assert rep.accuracy("Temporal", "Order") == 2 / 3
    assert rep.accuracy("Temporal") == 3 / 4
    assert rep.accuracy() == 5 / 8
    assert rep.macro_accuracy == pytest.approx((2 / 3 + 0 + 1 / 2 + 1 + 1) / 5)
    table = rep.to_table()
    assert "62.5" in table and "66.7" in table


def test_duplicate_ids_and_leaf_branch_clash():
    with pytest.raises(ValueError, match="duplicate"):
        score([q(0, "G/x"), q(0, "G/y")], {})
    with pytest.raises(ValueError, match="leaf and branch"):
        score([q(0, "G"), q(1, "G/x")], {})


@given(st.lists(st.tuples(st.sampled_from(["G/a", "G/b", "T/c/d", "T/e"]), st.booleans()), min_size=1, max_size=40))
def test_counts_add_up(items):
    qs = [q(i, p) for i, (p, _) in enumerate(items)]
    resp = {f"q{i}": ("A" if ok else "B") for i, (_, ok) in enumerate(items)}
    rep = score(qs, resp)
    assert rep.overall.total == len(items)
    assert rep.overall.correct == sum(ok for _, ok in items)
    for branch, cell in rep.branches.items():
        kids = [c for k, c in rep.leaves.items() if k[: len(branch)] == branch]
        assert cell.total == sum(c.total for c in kids)
        assert cell.correct == sum(c.correct for c in kids)


def test_question_validation():
    with pytest.raises(ValueError):
        BenchQuestion("x", (), "?", ("A", "B"), "A")
    with pytest.raises(ValueError):
        BenchQuestion("x", ("G",), "?", ("A", "B"), "C")


def test_manifest_validator():
    qs = [q(i, "Global/x") for i in range(2741)] + [q(2741 + i, "Temporal/y") for i in range(998)]
    check = validate_manifest(qs)
    assert check.ok and check.counts == {"Global": 2741, "Temporal": 998}
    assert sum(MUSICBENCH_SPLITS.values()) == MUSICBENCH_TOTAL == 3739
    bad = validate_manifest(qs[:-1] + [q(99999, "Other/z")])
    assert not bad.ok and len(bad.problems) == 2


# ---------------------------------------------------------------- structure F1


def ann(*segs):
    return SegmentAnnotation(tuple(Segment(*s) for s in segs))


def brute_force_matches(pred, truth, thr=0.5):
    elig = eligible_iou(pred, truth, thr)
    n, m = len(pred), len(truth)
    best = 0
    k = max(n, m)
    for perm in itertools.permutations(range(k)):
        cnt = sum(1 for i in range(n) if perm[i] < m and elig[i][perm[i]] is not None)
        best = max(best, cnt)
    return best


def oracle_f1(pred, truth, thr=0.5):
    n, m = len(pred), len(truth)
    if n == 0 and m == 0:
        return 1.0
    if n == 0 or m == 0:
        return 0.0
    k = brute_force_matches(pred, truth, thr)
    return 0.0 if k == 0 else 2 * k / (n + m)


def random_annotation(rng, k):
    cuts = np.sort(rng.choice(np.arange(1, 40), size=2 * k, replace=False)).astype(float)
    labels = rng.choice(STRUCTURE_LABELS[:3], size=k)
    return ann(*[(cuts[2 * i], cuts[2 * i + 1], str(labels[i])) for i in range(k)])


def test_structure_f1_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        p = random_annotation(rng, int(rng.integers(0, 7)))
        t = random_annotation(rng, int(rng.integers(0, 7)))
        assert structure_f1(p, t).f1 == pytest.approx(oracle_f1(p, t), abs=1e-12)


def test_matching_is_one_to_one():
    # one long prediction can meet both truths at IoU 0.5 but counts once
    truth = ann((0, 10, "verse"), (10, 20, "verse"))
    pred = ann((0, 20, "verse"))
    s = structure_f1(pred, truth)
    assert s.matches == 1 and s.precision == 1.0 and s.recall == 0.5
    pred2 = ann((1, 10, "verse"), (10, 19, "verse"))
    assert structure_f1(pred2, truth).matches == 2


def test_cross_label_never_matches():
    a = ann((0, 10, "verse"))
    b = ann((0, 10, "chorus"))
    assert iou(a.intervals[0], b.intervals[0]) == 1.0
    s = structure_f1(a, b)
    assert s.matches == 0 and s.f1 == 0.0


def test_iou_threshold_inclusive():
    a = ann((0, 10, "intro"))
    b = ann((0, 5, "intro"))
    assert structure_f1(a, b).f1 == 1.0
    c = ann((0, 4.999, "intro"))
    assert structure_f1(a, c).f1 == 0.0


def test_empty_annotations():
    e = ann()
    x = ann((0, 1, "silence"))
    assert structure_f1(e, e).f1 == 1.0
    assert structure_f1(e, x).f1 == 0.0 and structure_f1(x, e).f1 == 0.0
    assert corpus_structure_f1([(e, e), (e, x)]) == 0.5


@pytest.mark.parametrize(
    "segs",
    [
        [(0, 0, "verse")],
        [(5, 2, "verse")],
        [(0, 5, "verse"), (4, 8, "chorus")],
        [(4, 8, "chorus"), (0, 2, "verse")],
        [(0, 5, "hook")],
    ],
)
def test_annotation_validation(segs):
    with pytest.raises(ValueError):
        ann(*segs)


@pytest.mark.parametrize(
    "raw, label",
    [("Verse1", "verse"), ("chorus_2", "chorus"), ("prechorus", "verse"), ("INST", "instrumental"),
     ("solo", "instrumental"), ("end", "outro"), ("break", "bridge"), ("silence", "silence"), ("intro", "intro")],
)
def test_remap(raw, label):
    assert remap_label(raw) == label


def test_remap_unknown():
    with pytest.raises(ValueError):
        remap_label("xyzzy")
