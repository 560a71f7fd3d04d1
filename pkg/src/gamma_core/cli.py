"""``gamma-core`` command line.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Settings come from built-in defaults, then ``--config`` (a JSON object),
then explicit flags; later sources win.  Unknown config keys, out-of-range
values and a missing seed on stochastic subcommands exit with status 1 and
name the offending field.  Unknown flags exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from gamma_core import __version__
from gamma_core import curation, evalharness, grpo, segmenter
from gamma_core.dfn import gradcheck_dfn, save_checkpoint

log = logging.getLogger("gamma_core")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

GRADCHECK_SHAPES = [(b, s, d) for b in (1, 2) for s in (1, 3, 5) for d in (4, 8)]


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# name -> (type, default); a default of None means "unset"
_POLICY_FIELDS = {
    "G": (int, 4),
    "epsilon": (float, 0.04),
    "beta": (float, 0.2),
    "lr": (float, grpo.TOY_LR),
    "batch_size": (int, 4),
}
_CURATION_FIELDS = {
    "rollouts": (int, curation.DEFAULT_ROLLOUTS),
    "tau": (float, curation.TAU),
    "min_pass": (float, curation.MIN_PASS),
    "max_pass": (float, curation.MAX_PASS),
    "variant_margin": (float, curation.VARIANT_MARGIN),
}

FIELDS: dict[str, dict[str, tuple[type, object]]] = {
    "gradcheck": {"seed": (int, None), "step": (float, 1e-5), "tolerance": (float, 1e-5)},
    "segment": {"duration": (float, None), "stage": (int, None), "input": (str, None)},
    "grpo-train": {"seed": (int, None), "steps": (int, 300), **_POLICY_FIELDS},
    "curate": {
        "seed": (int, None),
        "pool": (str, None),
        "bench": (str, None),
        "policy": (str, None),
        "warmup_steps": (int, 40),
        **_CURATION_FIELDS,
    },
    "eval": {
        "questions": (str, None),
        "responses": (str, None),
        "structure": (list, None),
        "iou_threshold": (float, 0.5),
        "check_manifest": (bool, False),
    },
    "demo": {
        "seed": (int, None),
        "pool": (str, None),
        "n_seeds": (int, 24),
        "warmup_steps": (int, 40),
        "steps": (int, 200),
        "heldout": (int, 200),
        **_POLICY_FIELDS,
        **_CURATION_FIELDS,
    },
}
STOCHASTIC = {"gradcheck", "grpo-train", "curate", "demo"}


# ---------------------------------------------------------------- argument parsing


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamma-core", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gamma-core {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gradcheck": "finite-difference check of the fusion block",
        "segment": "token layout for full-length audio",
        "grpo-train": "train the toy policy with GRPO",
        "curate": "filter a candidate question pool",
        "eval": "score responses and structure annotations",
        "demo": "pool -> curation -> GRPO -> evaluation",
    }
    for cmd, fields in FIELDS.items():
        p = sub.add_parser(cmd, help=helps[cmd], argument_default=argparse.SUPPRESS)
        p.add_argument("--out", default=f"runs/{cmd}", help="output directory (default: runs/%(prog)s)")
        p.add_argument("--config", help="JSON file of settings; flags override it")
        for name, (typ, default) in fields.items():
            hint = f"(default: {default})" if default is not None else ""
            if typ is bool:
                p.add_argument(_flag(name), dest=name, action="store_true", help=hint)
            elif typ is list:
                p.add_argument(_flag(name), dest=name, nargs=2, metavar=("PRED", "TRUTH"), help=hint)
            else:
                p.add_argument(_flag(name), dest=name, type=typ, help=hint)
    return parser


def _coerce(field: str, typ: type, value):
    if value is None:
        return None
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is list and isinstance(value, list) and len(value) == 2:
        return [str(v) for v in value]
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    raise ConfigError(field, f"expected {typ.__name__}, got {value!r}")


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    fields = FIELDS[command]
    cfg = {name: default for name, (_, default) in fields.items()}
    if getattr(ns, "config", None):
        try:
            loaded = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", str(exc)) from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config", "must be a JSON object")
        for key, value in loaded.items():
            if key not in fields:
                raise ConfigError(key, f"unknown setting for {command}")
            cfg[key] = _coerce(key, fields[key][0], value)
    for name in fields:
        if name in ns:
            cfg[name] = getattr(ns, name)
    if command in STOCHASTIC and cfg.get("seed") is None:
        raise ConfigError("seed", f"required for {command}")
    for name in ("steps", "warmup_steps", "heldout", "n_seeds"):
        if name in cfg and cfg[name] < 0:
            raise ConfigError(name, "must be >= 0")
    return cfg


def policy_config(cfg: dict) -> grpo.PolicyConfig:
    try:
        return grpo.PolicyConfig(
            G=cfg["G"], epsilon=cfg["epsilon"], beta=cfg["beta"], lr=cfg["lr"], batch_size=cfg["batch_size"]
        )
    except ValueError as exc:
        raise ConfigError(str(exc).split(":")[0].split()[0], str(exc)) from exc


def curation_thresholds(cfg: dict) -> curation.CurationThresholds:
    try:
        return curation.CurationThresholds(
            min_pass=cfg["min_pass"],
            max_pass=cfg["max_pass"],
            variant_margin=cfg["variant_margin"],
            tau=cfg["tau"],
            rollouts=cfg["rollouts"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc).split()[0], str(exc)) from exc


# ---------------------------------------------------------------- run bookkeeping


class Run:
    """Output directory, stage timers and the manifest."""

    def __init__(self, command: str, out: Path, cfg: dict):
        self.command = command
        self.out = out
        self.cfg = cfg
        self.stages: dict[str, float] = {}
        self.outputs: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = time.perf_counter() - t0

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_jsonl(self, name: str, records) -> Path:
        p = self.path(name)
        with p.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def manifest(self, status: int) -> dict:
        return {
            "command": self.command,
            "tool_version": __version__,
            "config": self.cfg,
            "exit_status": status,
            "stage_seconds": self.stages,
            "outputs": {name: sha256_file(self.out / name) for name in sorted(self.outputs)},
        }

    def finish(self, status: int) -> int:
        (self.out / "manifest.json").write_text(
            json.dumps(self.manifest(status), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return status


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def verify_manifest(out: str | Path) -> list[str]:
    """Names of outputs whose digest no longer matches the manifest."""
    out = Path(out)
    man = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    return [name for name, digest in man["outputs"].items() if sha256_file(out / name) != digest]


# ---------------------------------------------------------------- subcommands


def cmd_gradcheck(run: Run, cfg: dict) -> int:
    rows = []
    with run.stage("gradcheck"):
        for i, (b, s, d) in enumerate(GRADCHECK_SHAPES):
            rep = gradcheck_dfn(b, s, d, seed=cfg["seed"] + i, step=cfg["step"], tolerance=cfg["tolerance"])
            rows.append({"shape": [b, s, d], **rep.to_record()})
            print(f"B={b} S={s} D={d}  worst rel err {rep.worst:.3e}  {'PASS' if rep.passed else 'FAIL'}")
    ok = all(r["passed"] for r in rows)
    run.write_json("gradcheck.json", {"passed": ok, "tolerance": cfg["tolerance"], "shapes": rows})
    print("gradcheck", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_segment(run: Run, cfg: dict) -> int:
    if (cfg["duration"] is None) == (cfg["input"] is None):
        raise ConfigError("duration", "give exactly one of --duration or --input")
    budget = None
    if cfg["stage"] is not None:
        if cfg["stage"] not in segmenter.STAGE_BUDGETS:
            raise ConfigError("stage", f"must be one of {sorted(segmenter.STAGE_BUDGETS)}")
        budget = segmenter.STAGE_BUDGETS[cfg["stage"]]
    if cfg["duration"] is not None:
        metas = [segmenter.AudioClipMeta(cfg["duration"])]
    else:
        recs = evalharness.read_jsonl(cfg["input"])
        metas = [segmenter.AudioClipMeta(float(r["duration"]), str(r.get("sample_id", f"clip-{i}"))) for i, r in enumerate(recs)]
    records = []
    with run.stage("segment"):
        for meta in metas:
            layout = segmenter.plan_layout(meta)
            rec = layout.to_record()
            if budget is not None:
                verdict = segmenter.enforce_budget(layout, budget)
                rec = verdict.layout.to_record()
                rec.update(
                    stage=budget.stage,
                    stage_max_tokens=budget.max_tokens,
                    fits=verdict.fits,
                    dropped_chunks=verdict.dropped_chunks,
                    requested_tokens=layout.total_audio_tokens,
                )
            records.append(rec)
            print(json.dumps(rec, sort_keys=True))
    run.write_jsonl("layout.jsonl", records)
    return 0


def _policy_record(policy: grpo.ToyPolicy, path: Path, meta: dict) -> None:
    save_checkpoint(policy.params, path, meta)


def load_policy(path: str) -> grpo.ToyPolicy:
    from gamma_core.dfn import load_checkpoint

    params, _ = load_checkpoint(path)
    for name in ("answer.w", "answer.b", "format.b"):
        if name not in params:
            raise ConfigError("policy", f"checkpoint lacks parameter {name}")
    return grpo.ToyPolicy(params)


def cmd_grpo_train(run: Run, cfg: dict) -> int:
    pcfg = policy_config(cfg)
    with run.stage("train"):
        res = grpo.train_toy(pcfg, cfg["steps"], cfg["seed"])
    run.write_jsonl("curve.jsonl", res.curve)
    _policy_record(res.policy, run.path("policy.ckpt.jsonl"), {"kind": "toy-policy", "steps": cfg["steps"]})
    if res.curve:
        print(
            f"steps={cfg['steps']} first acc={res.curve[0]['mean_accuracy']:.3f} "
            f"trailing acc={grpo.trailing_mean(res.curve, 'mean_accuracy'):.3f} "
            f"trailing fmt={grpo.trailing_mean(res.curve, 'mean_format'):.3f}"
        )
    return 0


def _read_bench(path: str) -> list[curation.ClipEmbedding]:
    return [curation.ClipEmbedding(str(r["clip_id"]), np.asarray(r["vector"], dtype=np.float64)) for r in evalharness.read_jsonl(path)]


def _warm_policy(cfg: dict, pcfg: grpo.PolicyConfig) -> grpo.ToyPolicy:
    return grpo.train_toy(pcfg, cfg["warmup_steps"], cfg["seed"]).policy


def cmd_curate(run: Run, cfg: dict) -> int:
    thresholds = curation_thresholds(cfg)
    with run.stage("load"):
        pool = curation.read_pool(cfg["pool"]) if cfg["pool"] else curation.make_pool(cfg["seed"])
        bench = _read_bench(cfg["bench"]) if cfg["bench"] else None
        if cfg["policy"]:
            policy = load_policy(cfg["policy"])
        else:
            policy = _warm_policy(cfg, grpo.PolicyConfig(lr=grpo.TOY_LR))
    with run.stage("curate"):
        res = curation.run_curation(pool, policy, cfg["seed"], thresholds, bench)
    curation.write_pool(res.kept, run.path("kept.jsonl"))
    run.write_jsonl("verdicts.jsonl", res.log)
    print(f"kept {len(res.kept)} of {len(pool)} candidates")
    return 0


def cmd_eval(run: Run, cfg: dict) -> int:
    if cfg["questions"] is None and cfg["structure"] is None:
        raise ConfigError("questions", "give --questions/--responses and/or --structure")
    report: dict = {}
    text = []
    with run.stage("eval"):
        if cfg["questions"] is not None:
            if cfg["responses"] is None:
                raise ConfigError("responses", "required with --questions")
            questions = evalharness.load_questions(cfg["questions"])
            responses = evalharness.load_responses(cfg["responses"])
            scored = evalharness.score(questions, responses)
            report["multiple_choice"] = scored.to_record()
            text.append(scored.to_table())
            if cfg["check_manifest"]:
                check = evalharness.validate_manifest(questions)
                report["manifest"] = {"ok": check.ok, "counts": check.counts, "problems": check.problems}
                text.append("manifest " + ("OK" if check.ok else "MISMATCH: " + "; ".join(check.problems)) + "\n")
        if cfg["structure"] is not None:
            pred, truth = cfg["structure"]
            s = evalharness.score_structure_files(pred, truth, cfg["iou_threshold"])
            report["structure"] = s
            lines = [f"{'track':<24}  {'P':>6}  {'R':>6}  {'F1':>6}"]
            for t in s["tracks"]:
                lines.append(
                    f"{t['track']:<24}  {evalharness.display_pct(t['precision']):>6}  "
                    f"{evalharness.display_pct(t['recall']):>6}  {evalharness.display_pct(t['f1']):>6}"
                )
            lines.append(f"{'macro F1':<24}  {'':>6}  {'':>6}  {evalharness.display_pct(s['macro_f1']):>6}")
            text.append("\n".join(lines) + "\n")
    run.write_json("report.json", report)
    run.write_text("report.txt", "\n".join(text))
    print("\n".join(text), end="")
    if "manifest" in report and not report["manifest"]["ok"]:
        return 1
    return 0


def _heldout_questions(seed: int, n: int) -> tuple[list[grpo.ToyTask], list[evalharness.BenchQuestion]]:
    stream = grpo.task_stream(seed + 1_000_003)
    tasks = [next(stream) for _ in range(n)]
    questions = []
    for t in tasks:
        gap = np.sort(t.features)[-1] - np.sort(t.features)[-2]
        bucket = "wide-margin" if gap >= 1.0 else "narrow-margin"
        questions.append(
            evalharness.BenchQuestion(f"held-{t.id}", ("Toy", bucket), f"held-out {t.id}", t.choices, t.gold_letter)
        )
    return tasks, questions


def _greedy_scores(policy, tasks, questions):
    responses = {q.id: policy.greedy(t) for t, q in zip(tasks, questions)}
    return evalharness.score(questions, responses)


def cmd_demo(run: Run, cfg: dict) -> int:
    seed = cfg["seed"]
    pcfg = policy_config(cfg)
    thresholds = curation_thresholds(cfg)
    summary: dict = {"seed": seed}

    with run.stage("pool"):
        pool = curation.read_pool(cfg["pool"]) if cfg["pool"] else curation.make_pool(seed, cfg["n_seeds"])
    curation.write_pool(pool, run.path("pool.jsonl"))
    summary["pool_size"] = len(pool)
    if not pool:
        log.warning("candidate pool is empty: nothing to train")
        summary["status"] = "nothing to train: empty pool"
        run.write_json("demo.json", summary)
        print(summary["status"])
        return 0

    tasks, questions = _heldout_questions(seed, cfg["heldout"])
    initial = grpo.ToyPolicy.create(seed=seed)
    with run.stage("warmup"):
        warm = grpo.train_toy(pcfg, cfg["warmup_steps"], seed, policy=initial.copy()).policy
    with run.stage("curate"):
        cur = curation.run_curation(pool, warm, seed, thresholds)
    curation.write_pool(cur.kept, run.path("kept.jsonl"))
    run.write_jsonl("verdicts.jsonl", cur.log)
    summary["kept"] = len(cur.kept)

    before = _greedy_scores(initial, tasks, questions)
    summary["initial_accuracy"] = before.overall.accuracy
    if not cur.kept:
        log.warning("curation kept no questions: nothing to train")
        summary["status"] = "nothing to train: curation kept no questions"
        run.write_json("demo.json", summary)
        print(f"pool {len(pool)} -> kept 0; nothing to train")
        return 0

    with run.stage("train"):
        res = grpo.train_toy(pcfg, cfg["steps"], seed + 1, tasks=[c.to_task() for c in cur.kept], policy=warm.copy())
    run.write_jsonl("curve.jsonl", res.curve)
    with run.stage("eval"):
        warm_report = _greedy_scores(warm, tasks, questions)
        after = _greedy_scores(res.policy, tasks, questions)
    summary.update(
        status="trained",
        warm_accuracy=warm_report.overall.accuracy,
        final_accuracy=after.overall.accuracy,
        before=before.to_record(),
        after=after.to_record(),
    )
    run.write_json("demo.json", summary)
    table = "before (untrained)\n" + before.to_table() + "\nafter GRPO on curated questions\n" + after.to_table()
    run.write_text("report.txt", table)
    print(
        f"pool {len(pool)} -> kept {len(cur.kept)}; held-out accuracy "
        f"{evalharness.display_pct(before.overall.accuracy)}% -> {evalharness.display_pct(after.overall.accuracy)}%"
    )
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "segment": cmd_segment,
    "grpo-train": cmd_grpo_train,
    "curate": cmd_curate,
    "eval": cmd_eval,
    "demo": cmd_demo,
}


def configure_logging() -> None:
    raw = os.environ.get("GAMMA_CORE_LOG", "warn").lower()
    if raw not in LOG_LEVELS:
        raise ConfigError("GAMMA_CORE_LOG", f"must be one of {sorted(LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=LOG_LEVELS[raw], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits 2 on unknown flags
    try:
        configure_logging()
        cfg = resolve_config(ns.command, ns)
        run = Run(ns.command, Path(getattr(ns, "out", f"runs/{ns.command}")), cfg)
        status = COMMANDS[ns.command](run, cfg)
    except ConfigError as exc:
        print(f"gamma-core {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"gamma-core {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    return run.finish(status)


if __name__ == "__main__":
    sys.exit(main())
