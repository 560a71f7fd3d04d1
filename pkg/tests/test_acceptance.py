"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line (also collected into the
pytest terminal summary).  Run directly with ``python tests/test_acceptance.py``
for just the ten lines.
"""

import itertools
import json
import math
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from gamma_core.cli import GRADCHECK_SHAPES, main as cli_main  # noqa: E402
from gamma_core.curation import (  # noqa: E402
    FixedRatePolicy,
    classify_pass,
    cosine,
    dedup_contamination,
    estimate_pass,
    make_contamination_corpus,
    retain_variant,
)
from gamma_core.dfn import (  # noqa: E402
    DfnConfig,
    ExpertEmbeddings,
    extract_inject,
    gate_and_fuse,
    gradcheck_dfn,
    init_params,
)
from gamma_core.evalharness import (  # noqa: E402
    STRUCTURE_LABELS,
    BenchQuestion,
    Segment,
    SegmentAnnotation,
    eligible_iou,
    score,
    structure_f1,
    validate_manifest,
)
from gamma_core.grpo import (  # noqa: E402
    TOY_LR,
    PolicyConfig,
    RolloutGroup,
    ToyPolicy,
    batch_objective,
    group_advantages,
    grpo_objective,
    make_task,
    sample_group,
    task_stream,
    train_toy,
    trailing_mean,
)
from gamma_core.hungarian import assignment_cost, hungarian  # noqa: E402
from gamma_core.numkernel import finite_diff_check  # noqa: E402
from gamma_core.segmenter import STAGE_BUDGETS, audio_tokens_for  # noqa: E402
from tests.acceptance_log import record  # noqa: E402

GRAD_TOL = 1e-5
GRAD_STEP = 1e-5


# ---------------------------------------------------------------- 1


def test_criterion_1_dfn_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    failures = []
    for i, (b, s, d) in enumerate(GRADCHECK_SHAPES):
        rep = gradcheck_dfn(b, s, d, seed=7 + i, step=GRAD_STEP, tolerance=GRAD_TOL)
        worst = max(worst, rep.worst)
        if not rep.passed:
            failures.append((b, s, d))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30.0 and len(GRADCHECK_SHAPES) == 12
    record(1, "DFN gradient check, 12 shapes", ok, f"worst rel err {worst:.2e}, {elapsed:.1f}s, failing {failures}")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_dfn_closed_forms():
    rng = np.random.default_rng(2024)
    problems = []
    for k in range(200):
        B, D = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        e1, e2 = rng.normal(size=(B, 1, D)), rng.normal(size=(B, 1, D))
        h1, h2 = extract_inject(e1, e2)
        if not (np.array_equal(h1, e1 + e2) and np.array_equal(h2, e1 + e2)):
            problems.append(("S=1 identity", k))

        S = int(rng.integers(1, 6))
        inp = ExpertEmbeddings(rng.normal(size=(B, S, D)), rng.normal(size=(B, S, D)))
        h1, h2 = extract_inject(inp.e1, inp.e2)
        s1, s2 = extract_inject(inp.e2, inp.e1)
        if not (np.array_equal(h1, s2) and np.array_equal(h2, s1)):
            problems.append(("swap symmetry", k))

        params = init_params(DfnConfig(hidden=D, seed=k))
        scale = 10.0 ** rng.uniform(-2, 2)
        g, fused = gate_and_fuse(scale * h1, scale * h2, params)
        lo, hi = np.minimum(scale * h1, scale * h2), np.maximum(scale * h1, scale * h2)
        if not (np.all(fused >= lo) and np.all(fused <= hi)):
            problems.append(("convex bound", k))

        for bias, side in ((60.0, 0), (-60.0, 1)):
            params.values["gate.w2"][:] = 0.0
            params.values["gate.b2"][:] = bias
            _, fused = gate_and_fuse(h1, h2, params)
            if np.max(np.abs(fused - (h1, h2)[side])) > 1e-9:
                problems.append(("saturation", k, side))
    ok = not problems
    record(2, "DFN closed forms (identity, symmetry, saturation, convexity)", ok, f"{len(problems)} violations / 200 instances")
    assert ok, problems[:5]


# ---------------------------------------------------------------- 3


def test_criterion_3_token_budget_table():
    table = {60: 1500, 300: 7500, 120: 3000}
    table_ok = all(audio_tokens_for(s) == n for s, n in table.items())
    table_ok &= {b.max_audio_seconds: b.max_tokens for b in STAGE_BUDGETS.values()} == table
    multiples_ok = all(audio_tokens_for(30 * m) == 25 * 30 * m for m in range(0, 201))
    prev, monotone = 0, True
    for k in range(1, 6001):
        n = audio_tokens_for(k / 10)
        monotone &= n >= prev
        prev = n
    ok = table_ok and multiples_ok and monotone
    record(3, "token budget table 60/300/120 s -> 1500/7500/3000", ok, f"table={table_ok} 25d={multiples_ok} monotone={monotone}")
    assert ok


# ---------------------------------------------------------------- 4


def _grpo_instance(seed):
    cfg = PolicyConfig()
    rng = np.random.default_rng(seed)
    policy = ToyPolicy.create(seed=seed)
    ref = policy.copy()
    ref.params.values["answer.w"] += 0.2 * rng.normal(size=ref.params["answer.w"].shape)
    groups = [sample_group(make_task(rng, f"t{i}", margin=1.0), policy, ref, cfg.G, rng) for i in range(3)]
    for name in policy.params:
        policy.params.values[name] += 0.02 * rng.normal(size=policy.params[name].shape)
    return cfg, policy, groups


def test_criterion_4_grpo_correctness():
    # (a) gradient vs central differences
    worst = 0.0
    grad_ok = True
    for seed in range(20):
        cfg, policy, groups = _grpo_instance(seed)
        rep = finite_diff_check(lambda p: batch_objective(groups, policy, cfg).value, policy.params, GRAD_STEP, GRAD_TOL)
        worst = max(worst, rep.worst)
        grad_ok &= rep.passed

    # (b) identity point
    ident_ok = True
    rng = np.random.default_rng(4)
    for k in range(100):
        policy = ToyPolicy.create(seed=k)
        g = sample_group(make_task(rng, f"t{k}"), policy, policy, 4, rng)
        terms = grpo_objective(g, policy, PolicyConfig())
        ident_ok &= terms.kl == 0.0 and terms.value == float(np.mean(g.advantages))

    # (c) advantages and zero-variance groups
    adv_ok = True
    for k in range(1000):
        r = rng.integers(0, 3, size=int(rng.integers(2, 9))).astype(float)
        adv_ok &= abs(group_advantages(r).sum()) <= 1e-9
    policy = ToyPolicy.create(seed=9)
    task = make_task(rng, "flat")
    outs = np.array([[0, task.gold]] * 4)
    lp = policy.token_logps(task.features, outs)
    flat = RolloutGroup(task, outs, [""] * 4, np.full(4, 2.0), np.ones(4), np.ones(4), lp, lp, policy.log_dists(task.features))
    batch_objective([flat], policy, PolicyConfig())
    zero_ok = all(np.all(policy.params.grads[n] == 0) for n in policy.params)

    ok = grad_ok and ident_ok and adv_ok and zero_ok
    record(4, "GRPO gradient, identity point, advantages", ok,
           f"worst rel err {worst:.2e}; identity={ident_ok}; adv sums={adv_ok}; zero-variance={zero_ok}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_grpo_convergence():
    cfg = PolicyConfig(G=4, epsilon=0.04, beta=0.2, lr=TOY_LR)
    seed, steps, window = 0, 500, 25
    t0 = time.perf_counter()
    res = train_toy(cfg, steps, seed)
    elapsed = time.perf_counter() - t0

    stream = task_stream(seed)
    first_tasks = [next(stream) for _ in range(cfg.batch_size)]
    init_expected = float(np.mean([ToyPolicy.create(seed=seed).expected_accuracy(t) for t in first_tasks]))
    start = res.curve[0]["mean_accuracy"]

    acc = [r["mean_accuracy"] for r in res.curve]
    reached = next(
        (t for t in range(window - 1, steps) if np.mean(acc[t - window + 1 : t + 1]) >= 0.9), None
    )
    fmt = trailing_mean(res.curve, "mean_format", window)
    again = train_toy(cfg, steps, seed)
    reproducible = again.curve == res.curve

    ok = start <= 0.35 and init_expected <= 0.35 and reached is not None and fmt >= 0.95 and elapsed < 120 and reproducible
    record(5, "GRPO convergence on the learnable 4-choice task", ok,
           f"start {start:.3f} (exact {init_expected:.3f}), trailing-25 acc >= 0.9 at step {reached}, "
           f"format {fmt:.3f}, {elapsed:.1f}s, reproducible={reproducible}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_curation_semantics():
    boundary_ok = classify_pass(0.25) == "kept" and classify_pass(1.0) == "too-easy"
    boundary_ok &= classify_pass(Fraction(16, 64)) == "kept" and classify_pass(Fraction(63, 64)) == "kept"

    grid_ok = all(
        retain_variant(s / 100, v / 100).keep == (25 <= v <= s - 25) for s in range(101) for v in range(101)
    )
    empty_ok = not any(retain_variant(s / 100, v / 100).keep for s in range(50) for v in range(101))

    train, bench, planted = make_contamination_corpus(seed=0, n_dups=20, n_distractors=200)
    sims = {c.clip_id: max(cosine(c.vector, b.vector) for b in bench) for c in train}
    corpus_ok = all(sims[i] > 0.95 for i in planted) and all(v < 0.9 for k, v in sims.items() if k not in planted)
    found = {d.train_id for d in dedup_contamination(train, bench, 0.95).discarded}
    recall = len(found & planted) / len(planted)
    precision = len(found & planted) / len(found) if found else 0.0

    ok = boundary_ok and grid_ok and empty_ok and corpus_ok and recall == 1.0 and precision == 1.0
    record(6, "curation boundaries, variant window, contamination", ok,
           f"boundaries={boundary_ok} grid={grid_ok} empty-window={empty_ok} recall={recall:.2f} precision={precision:.2f}")
    assert ok


# ---------------------------------------------------------------- 7


def _binomial_correct_prob(p, n=64):
    """Exact probability that k ~ Bin(n, p) lands in the right class."""
    lo = math.ceil(0.25 * n)
    keep = sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(lo, n))
    return keep if 0.25 <= p < 1.0 else 1.0 - keep - (p**n if p < 0.25 else 0.0)


def test_criterion_7_monte_carlo_calibration():
    rng = np.random.default_rng(7)
    n_q, n = 1000, 64
    correct = 0
    expected = 0.0
    for i in range(n_q):
        # uniform over [0, 0.20] u [0.30, 0.95]
        u = rng.uniform(0, 0.85)
        p = u if u <= 0.20 else u + 0.10
        task = make_task(rng, f"mc-{i}")
        est = estimate_pass(task, FixedRatePolicy(p), n, seed=7)
        truth = "kept" if 0.25 <= p < 1.0 else "too-hard"
        correct += classify_pass(est.exact_rate) == truth
        expected += _binomial_correct_prob(p, n)
    rate = correct / n_q
    ok = rate >= 0.95
    record(7, "Monte Carlo pass-rate calibration (n=64)", ok,
           f"{rate:.3f} correct over {n_q} questions; binomial expectation {expected / n_q:.3f}")
    assert ok


# ---------------------------------------------------------------- 8


def _ann(rng, k):
    cuts = np.sort(rng.choice(np.arange(1, 40), size=2 * k, replace=False)).astype(float)
    labels = rng.choice(STRUCTURE_LABELS, size=k)
    return SegmentAnnotation(tuple(Segment(cuts[2 * i], cuts[2 * i + 1], str(labels[i])) for i in range(k)))


def _brute_f1(pred, truth):
    n, m = len(pred), len(truth)
    if n == 0 and m == 0:
        return 1.0
    if n == 0 or m == 0:
        return 0.0
    elig = eligible_iou(pred, truth)
    best = max(
        sum(1 for i in range(n) if perm[i] < m and elig[i][perm[i]] is not None)
        for perm in itertools.permutations(range(max(n, m)))
    )
    return 2 * best / (n + m)


def _brute_cost(c):
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(c[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def test_criterion_8_harmonix_scorer():
    rng = np.random.default_rng(8)
    f1_mismatch = 0
    for _ in range(1000):
        p, t = _ann(rng, int(rng.integers(0, 7))), _ann(rng, int(rng.integers(0, 7)))
        if structure_f1(p, t).f1 != _brute_f1(p, t):
            f1_mismatch += 1
    cost_mismatch = 0
    for _ in range(1000):
        n, m = (int(v) for v in rng.integers(1, 7, size=2))
        c = rng.integers(-4, 5, size=(n, m)).astype(float) if rng.random() < 0.5 else rng.normal(size=(n, m))
        if abs(assignment_cost(c, hungarian(c)) - _brute_cost(c)) > 1e-9:
            cost_mismatch += 1
    a = SegmentAnnotation((Segment(0, 10, "verse"),))
    b = SegmentAnnotation((Segment(0, 10, "chorus"),))
    cross_ok = structure_f1(a, b).matches == 0
    ok = f1_mismatch == 0 and cost_mismatch == 0 and cross_ok
    record(8, "structure F1 and Hungarian vs brute force", ok,
           f"F1 mismatches {f1_mismatch}/1000, cost mismatches {cost_mismatch}/1000, cross-label rejected={cross_ok}")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_eval_arithmetic():
    def q(i, path, gold="A"):
        return BenchQuestion(f"q{i}", tuple(path.split("/")), "?", tuple("ABCD"), gold)

    fixture = [q(0, "Global/Genre"), q(1, "Global/Genre"), q(2, "Global/Genre"), q(3, "Global/Mood"),
               q(4, "Temporal/Order/Start"), q(5, "Temporal/Order/Start"), q(6, "Temporal/Order/End"), q(7, "Temporal/Count")]
    responses = {"q0": "<answer>A</answer>", "q1": "<answer>B</answer>", "q2": "(A)", "q3": "nothing",
                 "q4": "A", "q6": "The answer is A", "q7": "<answer>A</answer>"}
    rep = score(fixture, responses)
    expected = {
        ("Global", "Genre"): Fraction(2, 3), ("Global", "Mood"): Fraction(0), ("Global",): Fraction(1, 2),
        ("Temporal", "Order", "Start"): Fraction(1, 2), ("Temporal", "Order", "End"): Fraction(1),
        ("Temporal", "Order"): Fraction(2, 3), ("Temporal", "Count"): Fraction(1), ("Temporal",): Fraction(3, 4),
    }
    cells = {**rep.leaves, **rep.branches}
    arith_ok = all(Fraction(cells[k].correct, cells[k].total) == v for k, v in expected.items())
    arith_ok &= Fraction(rep.overall.correct, rep.overall.total) == Fraction(5, 8)

    qs = [q(i, "Global/x") for i in range(2741)] + [q(2741 + i, "Temporal/y") for i in range(998)]
    check = validate_manifest(qs)
    manifest_ok = check.ok and len(qs) == 3739
    manifest_ok &= not validate_manifest(qs[1:]).ok
    ok = arith_ok and manifest_ok
    record(9, "hierarchical accuracy arithmetic, MusicBench 2741/998/3739", ok,
           f"arithmetic={arith_ok} manifest={manifest_ok}")
    assert ok


# ---------------------------------------------------------------- 10


def _write_jsonl(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return str(path)


def test_criterion_10_cli_determinism():
    import contextlib
    import io

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        qs = _write_jsonl(tmp / "q.jsonl", [{"id": "a", "category": ["G", "x"], "choices": list("ABCD"), "gold": "B"}])
        rs = _write_jsonl(tmp / "r.jsonl", [{"id": "a", "response": "<answer>B</answer>"}])
        st = _write_jsonl(tmp / "s.jsonl", [{"track": "t", "intervals": [[0, 4, "intro"], [4, 9, "verse"]]}])
        commands = {
            "gradcheck": ["gradcheck", "--seed", "7"],
            "segment": ["segment", "--duration", "300", "--stage", "2"],
            "grpo-train": ["grpo-train", "--seed", "1", "--steps", "100"],
            "curate": ["curate", "--seed", "2"],
            "eval": ["eval", "--questions", qs, "--responses", rs, "--structure", st, st],
            "demo": ["demo", "--seed", "3"],
        }
        differing = []
        for name, argv in commands.items():
            outs = []
            for rep in ("a", "b"):
                out = tmp / name / rep
                with contextlib.redirect_stdout(io.StringIO()):
                    status = cli_main(argv + ["--out", str(out)])
                files = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}
                outs.append((status, files))
            if outs[0] != outs[1] or outs[0][0] != 0 or not outs[0][1]:
                differing.append(name)
    ok = not differing
    record(10, "CLI reruns byte-identical for all six subcommands", ok, f"differing: {differing or 'none'}")
    assert ok


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(
        ((k, v) for k, v in globals().items() if k.startswith("test_criterion_")),
        key=lambda kv: int(kv[0].split("_")[2]),
    ):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
