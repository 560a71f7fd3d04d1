"""Group relative policy optimisation on a toy multiple-choice policy.

The toy policy emits two tokens per response: a *format* token choosing
how the answer is wrapped, then an *answer* token choosing a letter.  The
rendered text is scored by the accuracy and format rewards, rewards are
standardised within each group of ``G`` samples, and the clipped
surrogate minus ``beta * KL(pi || pi_ref)`` is maximised by plain
gradient ascent with analytic gradients.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from gamma_core.numkernel import NonFiniteError, ParamStore, log_softmax, uniform_init

log = logging.getLogger(__name__)

LETTERS = "ABCDEFGHIJ"
# index -> rendering of the format token
FORMAT_STYLES = ("tagged", "bare", "unclosed")
ADV_EPS = 1e-8


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class PolicyConfig:
    G: int = 4
    epsilon: float = 0.04
    beta: float = 0.2
    lr: float = 1e-6
    batch_size: int = 4
    updates_per_batch: int = 1

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G: group size must be >= 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon: clip threshold must be > 0")
        if self.beta < 0:
            raise ValueError("beta: KL weight must be >= 0")
        if self.lr < 0:
            raise ValueError("lr: learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.updates_per_batch < 1:
            raise ValueError("updates_per_batch must be >= 1")


# ---------------------------------------------------------------- rewards


@dataclass(frozen=True)
class RewardSpec:
    accuracy_weight: float = 1.0
    format_weight: float = 1.0
    open_tag: str = "<answer>"
    close_tag: str = "</answer>"

    def wrap(self, answer: str) -> str:
        return f"{self.open_tag}{answer}{self.close_tag}"


class Reward(NamedTuple):
    accuracy: float
    format: float
    total: float


def answer_spans(text: str, spec: RewardSpec = RewardSpec()) -> list[str]:
    pattern = re.escape(spec.open_tag) + r"(.*?)" + re.escape(spec.close_tag)
    return re.findall(pattern, text, flags=re.S)


def compute_reward(text: str, gold: str, spec: RewardSpec = RewardSpec()) -> Reward:
    """Accuracy needs exactly one tagged span equal to ``gold``; format also
    needs nothing but whitespace outside that span."""
    spans = answer_spans(text, spec)
    accuracy = fmt = 0.0
    if len(spans) == 1:
        inner = spans[0].strip()
        if inner.upper() == gold.strip().upper():
            accuracy = 1.0
        bare = text.strip()
        if (
            inner
            and spec.open_tag not in spans[0]
            and bare == spec.wrap(spans[0])
        ):
            fmt = 1.0
    total = spec.accuracy_weight * accuracy + spec.format_weight * fmt
    return Reward(accuracy, fmt, total)


def group_advantages(rewards) -> np.ndarray:
    """Standardise rewards within one group (population std)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    std = r.std()
    if std < ADV_EPS:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + ADV_EPS)


# ---------------------------------------------------------------- toy task + policy


@dataclass(frozen=True)
class ToyTask:
    id: str
    features: np.ndarray
    gold: int

    @property
    def n_choices(self) -> int:
        return self.features.shape[0]

    @property
    def choices(self) -> tuple[str, ...]:
        return tuple(LETTERS[: self.n_choices])

    @property
    def gold_letter(self) -> str:
        return LETTERS[self.gold]


def make_task(rng: np.random.Generator, task_id: str, n_choices: int = 4, margin: float = 0.0) -> ToyTask:
    """Gaussian features with ``margin`` added to a random gold slot; the
    gold answer is always the argmax feature."""
    x = rng.normal(size=n_choices)
    if margin:
        x[rng.integers(n_choices)] += margin
    return ToyTask(task_id, x, int(np.argmax(x)))


# default separation for the learnable stream; 0 gives plain Gaussian argmax
LEARNABLE_MARGIN = 3.0
# raised toy step size used for convergence runs (the full-model default of 1e-6 is
# far too small for a 20-parameter policy in 500 steps)
TOY_LR = 0.5


def task_stream(seed: int, n_choices: int = 4, margin: float = LEARNABLE_MARGIN) -> Iterator[ToyTask]:
    rng = np.random.default_rng([seed, 0x7A5C])
    i = 0
    while True:
        yield make_task(rng, f"task-{i}", n_choices, margin)
        i += 1


def render(format_token: int, answer_token: int, spec: RewardSpec = RewardSpec()) -> str:
    letter = LETTERS[answer_token]
    style = FORMAT_STYLES[format_token]
    if style == "tagged":
        return spec.wrap(letter)
    if style == "bare":
        return letter
    return spec.open_tag + letter


class ToyPolicy:
    """Linear softmax over answer letters plus a context-free format head."""

    def __init__(self, params: ParamStore):
        self.params = params

    @classmethod
    def create(cls, n_features: int = 4, n_choices: int = 4, seed: int = 0, init_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        p = ParamStore()
        p.add("answer.w", init_scale * uniform_init(rng, n_features, (n_features, n_choices)))
        p.add("answer.b", np.zeros((1, n_choices)))
        p.add("format.b", np.zeros((1, len(FORMAT_STYLES))))
        return cls(p)

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.params.copy())

    @property
    def n_choices(self) -> int:
        return self.params["answer.w"].shape[1]

    def log_dists(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log-distributions at the two output positions: (format, answer)."""
        fmt_logits = self.params["format.b"][0]
        ans_logits = features @ self.params["answer.w"] + self.params["answer.b"][0]
        return log_softmax(fmt_logits), log_softmax(ans_logits)

    def sample(self, features: np.ndarray, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """(n, 2) array of (format token, answer token)."""
        lf, la = self.log_dists(features)
        fmt = rng.choice(len(lf), size=n, p=np.exp(lf))
        ans = rng.choice(len(la), size=n, p=np.exp(la))
        return np.stack([fmt, ans], axis=1)

    def respond(self, task: ToyTask, rng: np.random.Generator) -> str:
        f, a = self.sample(task.features, rng)[0]
        return render(int(f), int(a))

    def greedy(self, task: ToyTask) -> str:
        lf, la = self.log_dists(task.features)
        return render(int(np.argmax(lf)), int(np.argmax(la)))

    def token_logps(self, features: np.ndarray, outputs: np.ndarray) -> np.ndarray:
        lf, la = self.log_dists(features)
        return np.stack([lf[outputs[:, 0]], la[outputs[:, 1]]], axis=1)

    def expected_accuracy(self, task: ToyTask) -> float:
        lf, la = self.log_dists(task.features)
        return float(np.exp(lf[0] + la[task.gold]))


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> float:
    """Exact KL(p || q) from log-probabilities."""
    p = np.exp(logp)
    return float(np.sum(p * (logp - logq)))


def policy_kl(policy: ToyPolicy, ref: ToyPolicy, features: np.ndarray) -> float:
    """KL averaged over the two output positions."""
    new = policy.log_dists(features)
    old = ref.log_dists(features)
    return 0.5 * (categorical_kl(new[0], old[0]) + categorical_kl(new[1], old[1]))


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutGroup:
    task: ToyTask
    outputs: np.ndarray  # (G, T) token ids
    texts: list[str]
    rewards: np.ndarray  # (G,) total reward
    accuracy: np.ndarray
    format: np.ndarray
    logp_old: np.ndarray  # (G, T)
    logp_ref: np.ndarray  # (G, T)
    ref_dists: tuple[np.ndarray, np.ndarray]  # full reference log-distributions per position
    advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)

    @property
    def G(self) -> int:
        return self.outputs.shape[0]


def sample_group(
    task: ToyTask,
    policy: ToyPolicy,
    ref: ToyPolicy,
    G: int,
    rng: np.random.Generator,
    spec: RewardSpec = RewardSpec(),
) -> RolloutGroup:
    outputs = policy.sample(task.features, rng, G)
    texts = [render(int(f), int(a), spec) for f, a in outputs]
    scored = [compute_reward(t, task.gold_letter, spec) for t in texts]
    return RolloutGroup(
        task=task,
        outputs=outputs,
        texts=texts,
        rewards=np.array([r.total for r in scored]),
        accuracy=np.array([r.accuracy for r in scored]),
        format=np.array([r.format for r in scored]),
        logp_old=policy.token_logps(task.features, outputs),
        logp_ref=ref.token_logps(task.features, outputs),
        ref_dists=ref.log_dists(task.features),
    )


# ---------------------------------------------------------------- objective


class ObjectiveTerms(NamedTuple):
    value: float
    surrogate: float
    kl: float
    clipped_fraction: float


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-token ``min(r A, clip(r) A)`` and its derivative w.r.t. log r."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    take_unclipped = unclipped <= clipped
    value = np.where(take_unclipped, unclipped, clipped)
    d_logp = np.where(take_unclipped, unclipped, 0.0)
    return value, d_logp


def grpo_objective(
    group: RolloutGroup,
    policy: ToyPolicy,
    cfg: PolicyConfig,
    weight: float = 1.0,
) -> ObjectiveTerms:
    """Objective for one group; ``weight * dJ/dtheta`` is accumulated into
    ``policy.params.grads`` (old and reference log-probs are constants)."""
    x = group.task.features
    lf, la = policy.log_dists(x)
    logp_new = np.stack([lf[group.outputs[:, 0]], la[group.outputs[:, 1]]], axis=1)
    delta = logp_new - group.logp_old
    with np.errstate(over="ignore"):
        ratio = np.exp(delta)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError(
            f"non-finite importance ratio in group {group.task.id} (max log-ratio {np.max(delta):.3g})"
        )
    G, T = group.outputs.shape
    adv = group.advantages[:, None]
    surr, d_logp = clipped_surrogate(ratio, adv, cfg.epsilon)
    # per-output token mean, then group mean
    surrogate = float(np.mean(np.mean(surr, axis=1)))

    ref_f, ref_a = group.ref_dists
    kl_f = categorical_kl(lf, ref_f)
    kl_a = categorical_kl(la, ref_a)
    kl = 0.5 * (kl_f + kl_a)
    value = surrogate - cfg.beta * kl

    # d surrogate / d logits, position by position
    d_logp = d_logp / (G * T)
    pf, pa = np.exp(lf), np.exp(la)
    g_fmt = np.zeros_like(pf)
    g_ans = np.zeros_like(pa)
    for i in range(G):
        onehot_f = np.zeros_like(pf)
        onehot_f[group.outputs[i, 0]] = 1.0
        onehot_a = np.zeros_like(pa)
        onehot_a[group.outputs[i, 1]] = 1.0
        g_fmt += d_logp[i, 0] * (onehot_f - pf)
        g_ans += d_logp[i, 1] * (onehot_a - pa)
    # d KL / d logits = p * (log p - log q - KL)
    g_fmt -= cfg.beta * 0.5 * pf * (lf - ref_f - kl_f)
    g_ans -= cfg.beta * 0.5 * pa * (la - ref_a - kl_a)

    params = policy.params
    params.accumulate("format.b", weight * g_fmt[None, :])
    params.accumulate("answer.b", weight * g_ans[None, :])
    params.accumulate("answer.w", weight * np.outer(x, g_ans))

    clipped = float(np.mean(np.abs(np.clip(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) - ratio) > 0))
    return ObjectiveTerms(value, surrogate, kl, clipped)


def batch_objective(groups: list[RolloutGroup], policy: ToyPolicy, cfg: PolicyConfig) -> ObjectiveTerms:
    """Mean objective over groups; zeroes and fills ``policy.params.grads``."""
    policy.params.zero_grad()
    w = 1.0 / len(groups)
    terms = [grpo_objective(g, policy, cfg, weight=w) for g in groups]
    return ObjectiveTerms(*(float(np.mean([t[k] for t in terms])) for k in range(4)))


def ascent_step(policy: ToyPolicy, lr: float) -> None:
    for name in policy.params:
        policy.params.values[name] += lr * policy.params.grads[name]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    curve: list[dict]
    policy: ToyPolicy
    ref: ToyPolicy


def query_rng(seed: int, step: int, index: int) -> np.random.Generator:
    # keyed per query so results do not depend on rollout scheduling
    return np.random.default_rng([seed, step, index])


def train_toy(
    cfg: PolicyConfig,
    steps: int,
    seed: int,
    tasks: Iterator[ToyTask] | list[ToyTask] | None = None,
    policy: ToyPolicy | None = None,
    spec: RewardSpec = RewardSpec(),
) -> TrainResult:
    """Sample -> reward -> advantage -> objective -> ascent, ``steps`` times.

    ``tasks`` may be an endless iterator or a finite list (cycled).  The
    reference policy is a frozen copy of the starting policy.
    """
    if policy is None:
        policy = ToyPolicy.create(seed=seed)
    ref = policy.copy()
    if tasks is None:
        tasks = task_stream(seed)
    if isinstance(tasks, list):
        if not tasks:
            raise ValueError("train_toy: empty task list")
        pool = tasks

        def cycle():
            i = 0
            while True:
                yield pool[i % len(pool)]
                i += 1

        tasks = cycle()

    curve = []
    for step in range(steps):
        batch = [next(tasks) for _ in range(cfg.batch_size)]
        groups = [
            sample_group(t, policy, ref, cfg.G, query_rng(seed, step, qi), spec)
            for qi, t in enumerate(batch)
        ]
        kl_before = float(np.mean([policy_kl(policy, ref, t.features) for t in batch]))
        terms = None
        for _ in range(cfg.updates_per_batch):
            terms = batch_objective(groups, policy, cfg)
            ascent_step(policy, cfg.lr)
        rec = {
            "step": step,
            "mean_accuracy": float(np.mean([g.accuracy.mean() for g in groups])),
            "mean_format": float(np.mean([g.format.mean() for g in groups])),
            "mean_kl": kl_before,
            "objective": terms.value,
        }
        curve.append(rec)
        if step % 50 == 0:
            log.debug("step %d acc=%.3f fmt=%.3f kl=%.4f", step, rec["mean_accuracy"], rec["mean_format"], rec["mean_kl"])
    return TrainResult(curve, policy, ref)


def expected_accuracy(policy: ToyPolicy, tasks: list[ToyTask]) -> float:
    """Exact probability of a tagged, correct response, averaged over tasks."""
    return float(np.mean([policy.expected_accuracy(t) for t in tasks]))


def trailing_mean(curve: list[dict], key: str, window: int = 25) -> float:
    tail = curve[-window:]
    return float(np.mean([r[key] for r in tail])) if tail else math.nan
