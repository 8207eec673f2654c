"""Hierarchical alternating GRPO trainer, flat baseline, and policy evaluation.

Training consumes oracle trajectory records. Each iteration runs two phases:
phase A samples action groups from the executor against oracle actions and
updates it; phase B samples subgoal groups from the planner, scores them with
the foresight reward (format + executor feedback + feasibility judge) against
the freshly updated executor, and updates the planner. Rollout counters audit
the n*G sampling cost live.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from hgrpo.env.device import DeviceEnv
from hgrpo.env.types import AtomicAction, ScreenState
from hgrpo.errors import ActionParseError, ContractViolation, DependencyError
from hgrpo.grpo import (
    AdamState,
    Gradient,
    GroupBatch,
    GroupMember,
    GrpoConfig,
    apply_adam_update,
    apply_update,
    loss_gradient,
)
from hgrpo.oracle import TrajectoryRecord, load_records
from hgrpo.policy import (
    ContextEncoder,
    DecodingConfig,
    EncodedContext,
    PolicyParams,
    greedy_sequence,
    init_params,
    sample_sequence,
    sequence_logprob,
)
from hgrpo.rewards import (
    RewardWeights,
    ToleranceConfig,
    env_reward,
    extract_instruction_body,
    foresight_reward,
    format_reward,
    judge_feasibility,
    normalize_group,
)
from hgrpo.tasks import Task
from hgrpo.vocab import Vocabulary, build_vocabulary, decode_action, decode_subgoal, make_grammar

logger = logging.getLogger(__name__)

FAILURE_TAGS = (
    "complex-ui/missing-target",
    "external-dependency/latency",
    "incorrect-navigation",
    "premature-termination",
    "goal-misunderstanding",
)


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 6
    iterations: int = 2000
    batch_records: int = 64
    low_steps_per_iteration: int = 1
    high_steps_per_iteration: int = 1
    sigma_floor: float = 1e-6
    low_level_norm: str = "batch"  # Eq.-literal batch statistics; "group" switches
    feature_dim: int = 2048
    seed: int = 7
    probe_every: int = 20
    target_success: float | None = None
    ref_refresh: str = "iteration"  # or "never": pin KL reference to the init
    max_episode_steps: int | None = None
    decoding_high: DecodingConfig = field(default_factory=lambda: DecodingConfig())
    decoding_low: DecodingConfig = field(default_factory=lambda: DecodingConfig())

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ContractViolation("group_size must be >= 2")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.low_level_norm not in ("batch", "group"):
            raise ContractViolation("low_level_norm must be 'batch' or 'group'")
        if self.ref_refresh not in ("iteration", "never"):
            raise ContractViolation("ref_refresh must be 'iteration' or 'never'")


@dataclass
class IterationStats:
    iteration: int
    mean_high_reward: float = float("nan")
    mean_low_reward: float = float("nan")
    probe_success: float = float("nan")
    rollouts_high: int = 0
    rollouts_low: int = 0
    grad_norm_high: float = float("nan")
    grad_norm_low: float = float("nan")
    kl_high: float = float("nan")
    kl_low: float = float("nan")

    FIELDS = ("iteration", "mean_high_reward", "mean_low_reward", "probe_success",
              "rollouts_high", "rollouts_low", "grad_norm_high", "grad_norm_low",
              "kl_high", "kl_low")

    def row(self) -> list[Any]:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class LoadedRecord:
    record: TrajectoryRecord
    screen: ScreenState
    oracle_action: AtomicAction


def load_dataset(dataset_dir: str | Path) -> list[LoadedRecord]:
    dataset_dir = Path(dataset_dir)
    records_path = dataset_dir / "records.json"
    if not records_path.exists():
        raise DependencyError(f"no dataset at {dataset_dir}; run gen-data first")
    out = []
    for rec in load_records(records_path):
        screen = ScreenState.from_dict(
            json.loads((dataset_dir / rec.image_path).read_text()))
        out.append(LoadedRecord(rec, screen, rec.action()))
    return out


@dataclass(frozen=True)
class AuditRow:
    n: int
    group_size: int
    hier_count: int
    flat_count: int
    saturated: bool


def rollout_audit(n: int, group_size: int) -> AuditRow:
    """Hierarchical vs flat sampling cost for an n-step task."""
    if n < 1 or group_size < 1:
        raise ContractViolation("n and group size must be >= 1")
    flat = group_size ** n
    return AuditRow(n, group_size, n * group_size, flat, flat > 2 ** 63 - 1)


def _rng_for(seed: int, *streams: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed,) + streams))


class HierTrainer:
    """Alternating two-level GRPO over an oracle record dataset."""

    def __init__(self, env: DeviceEnv, suite: Sequence[Task],
                 dataset: Sequence[LoadedRecord],
                 config: TrainConfig = TrainConfig(),
                 grpo: GrpoConfig = GrpoConfig(),
                 weights: RewardWeights = RewardWeights(),
                 tol: ToleranceConfig = ToleranceConfig()):
        if not dataset:
            raise ContractViolation("dataset must be non-empty")
        self.env = env
        self.suite = list(suite)
        self.dataset = list(dataset)
        self.config = config
        self.grpo = grpo
        self.weights = weights
        self.tol = tol

        self.vocab = build_vocabulary([t.instruction for t in suite],
                                      env.library.all_labels())
        self.encoder = ContextEncoder(config.feature_dim, self.vocab)
        self.grammar_high = make_grammar(self.vocab, "high")
        self.grammar_low = make_grammar(self.vocab, "low")
        rng = _rng_for(config.seed, 0)
        self.params_h = init_params(rng, config.feature_dim, self.vocab.size, "high")
        self.params_l = init_params(rng, config.feature_dim, self.vocab.size, "low")
        self._ref_h = self.params_h.copy()
        self._ref_l = self.params_l.copy()
        self._adam_h = AdamState.for_params(self.params_h)
        self._adam_l = AdamState.for_params(self.params_l)
        self._ctx_cache: dict[tuple[int, str], EncodedContext] = {}

        # Live rollout accounting, keyed by task instruction (the record's
        # problem field); validated against rollout_audit in tests.
        self.counters: dict[str, Any] = {
            "high": {}, "low": {}, "samples": 0, "low_inference": 0}

    # -- contexts -----------------------------------------------------------

    def _ctx(self, idx: int, screen: ScreenState, conditioning: str) -> EncodedContext:
        key = (idx, conditioning)
        ctx = self._ctx_cache.get(key)
        if ctx is None:
            ctx = self.encoder.encode_base(screen, conditioning)
            if len(self._ctx_cache) > 50000:
                self._ctx_cache.clear()
            self._ctx_cache[key] = ctx
        return ctx

    # -- group collection -----------------------------------------------------

    def collect_low_level_group(self, idx: int, rng: np.random.Generator,
                                ref_params: PolicyParams) -> GroupBatch:
        """G action samples for one record, rewarded by oracle match."""
        rec = self.dataset[idx]
        ctx = self._ctx(idx, rec.screen, rec.record.instruction)
        members = []
        cfg = replace(self.config.decoding_low, group_size=self.config.group_size)
        for _ in range(self.config.group_size):
            seq, logps = sample_sequence(self.params_l, ctx, self.grammar_low, cfg, rng)
            try:
                reward = env_reward(decode_action(seq, self.vocab),
                                    rec.oracle_action, self.tol)
            except ActionParseError:
                reward = 0
            ref_logps = logps if ref_params is self.params_l else \
                sequence_logprob(ref_params, ctx, self.grammar_low, seq)
            members.append(GroupMember(seq, logps, ref_logps, 0.0, float(reward)))
        rewards = [m.reward for m in members]
        if self.config.low_level_norm == "group":
            for m, adv in zip(members, normalize_group(rewards, self.config.sigma_floor)):
                m.advantage = float(adv)
        self._count("low", rec.record.problem, len(members))
        self.counters["samples"] += len(members)
        return GroupBatch(ctx, self.grammar_low, members, ref_params)

    def collect_high_level_group(self, idx: int, rng: np.random.Generator,
                                 ref_params: PolicyParams) -> GroupBatch:
        """G subgoal samples scored by the foresight reward.

        The frozen executor runs greedily once per sample (exactly G low-level
        inference calls, no low-level gradient work); ill-formed subgoals get
        zero format reward and an atomicity judge failure, never an abort.
        """
        rec = self.dataset[idx]
        ctx = self._ctx(idx, rec.screen, rec.record.problem)
        members = []
        cfg = replace(self.config.decoding_high, group_size=self.config.group_size)
        for _ in range(self.config.group_size):
            seq, logps = sample_sequence(self.params_h, ctx, self.grammar_high, cfg, rng)
            text = decode_subgoal(seq, self.vocab)
            r_fmt = format_reward(text)
            body = extract_instruction_body(text)
            ctx_l = self.encoder.encode_base(rec.screen, body if body else text)
            action_seq = greedy_sequence(self.params_l, ctx_l, self.grammar_low,
                                         self.config.decoding_low.max_length)
            self.counters["low_inference"] += 1
            try:
                r_env = env_reward(decode_action(action_seq, self.vocab),
                                   rec.oracle_action, self.tol)
            except ActionParseError:
                r_env = 0
            r_judge = judge_feasibility(rec.screen, text).reward
            breakdown = foresight_reward(r_fmt, r_env, r_judge, self.weights)
            ref_logps = logps if ref_params is self.params_h else \
                sequence_logprob(ref_params, ctx, self.grammar_high, seq)
            members.append(GroupMember(seq, logps, ref_logps, 0.0, breakdown.r_total))
        rewards = [m.reward for m in members]
        for m, adv in zip(members, normalize_group(rewards, self.config.sigma_floor)):
            m.advantage = float(adv)
        self._count("high", rec.record.problem, len(members))
        self.counters["samples"] += len(members)
        return GroupBatch(ctx, self.grammar_high, members, ref_params)

    def _count(self, level: str, problem: str, n: int) -> None:
        bucket = self.counters[level]
        bucket[problem] = bucket.get(problem, 0) + n

    # -- training -------------------------------------------------------------

    def _batches_for_iteration(self, iteration: int) -> list[int]:
        n = len(self.dataset)
        take = min(self.config.batch_records, n)
        cycle, offset = divmod(iteration * take, n)
        order = _rng_for(self.config.seed, 1, cycle).permutation(n)
        picked = [int(order[(offset + j) % n]) for j in range(take)]
        return picked

    def _update(self, params: PolicyParams, batches: list[GroupBatch],
                adam: AdamState) -> tuple[PolicyParams, float]:
        grad_norm = float("nan")
        for _ in range(self.grpo.epochs):
            grad = loss_gradient(params, batches, self.grpo)
            grad_norm = grad.norm()
            if self.grpo.optimizer == "adam":
                params = apply_adam_update(params, grad, self.grpo, adam)
            else:
                params = apply_update(params, grad, self.grpo)
        return params, grad_norm

    def _apply_batch_norm(self, groups: list[GroupBatch]) -> None:
        members = [m for g in groups for m in g.members]
        if len(members) < 2:
            return
        advs = normalize_group([m.reward for m in members], self.config.sigma_floor)
        for m, adv in zip(members, advs):
            m.advantage = float(adv)

    def probe_success(self, seed: int = 0) -> float:
        report = evaluate_policy(self.env, self.suite, self.hier_actor(),
                                 max_steps=self.config.max_episode_steps, seed=seed)
        return report.success_rate

    def alternate_train(self, on_iteration: Callable[[IterationStats], None] | None = None
                        ) -> list[IterationStats]:
        """Eq.-6 style loop: fix planner, train executor; then fix executor,
        train planner against it. Returns per-iteration statistics."""
        stats_log: list[IterationStats] = []
        for k in range(1, self.config.iterations + 1):
            stats = IterationStats(iteration=k)

            # Phase A: low level (planner frozen).
            h_version_before = self.params_h.version
            for step in range(self.config.low_steps_per_iteration):
                rng = _rng_for(self.config.seed, 2, k, step)
                ref = self.params_l if self.config.ref_refresh == "iteration" else self._ref_l
                idxs = self._batches_for_iteration(k - 1)
                groups = [self.collect_low_level_group(i, rng, ref) for i in idxs]
                if self.config.low_level_norm == "batch":
                    self._apply_batch_norm(groups)
                stats.rollouts_low += sum(len(g.members) for g in groups)
                stats.mean_low_reward = float(np.mean(
                    [m.reward for g in groups for m in g.members]))
                self.params_l, stats.grad_norm_low = self._update(
                    self.params_l, groups, self._adam_l)
            assert self.params_h.version == h_version_before

            # Phase B: high level (fresh executor frozen).
            l_version_after_a = self.params_l.version
            for step in range(self.config.high_steps_per_iteration):
                rng = _rng_for(self.config.seed, 3, k, step)
                ref = self.params_h if self.config.ref_refresh == "iteration" else self._ref_h
                idxs = self._batches_for_iteration(k - 1)
                groups = [self.collect_high_level_group(i, rng, ref) for i in idxs]
                stats.rollouts_high += sum(len(g.members) for g in groups)
                stats.mean_high_reward = float(np.mean(
                    [m.reward for g in groups for m in g.members]))
                self.params_h, stats.grad_norm_high = self._update(
                    self.params_h, groups, self._adam_h)
            assert self.params_l.version == l_version_after_a

            if self.config.probe_every and k % self.config.probe_every == 0:
                stats.probe_success = self.probe_success()
            stats_log.append(stats)
            if on_iteration is not None:
                on_iteration(stats)
            if stats.probe_success == stats.probe_success and \
                    self.config.target_success is not None and \
                    stats.probe_success >= self.config.target_success:
                logger.info("target success %.3f reached at iteration %d",
                            stats.probe_success, k)
                break
        return stats_log

    # -- actors ---------------------------------------------------------------

    def hier_actor(self) -> "Actor":
        return make_hier_actor(self.encoder, self.vocab, self.grammar_high,
                               self.grammar_low, self.params_h, self.params_l,
                               self.config.decoding_high.max_length,
                               self.config.decoding_low.max_length)


class FlatTrainer:
    """Degenerate architecture: one policy maps (screen, instruction) to
    actions; same GRPO core, rewards, and dataset."""

    def __init__(self, env: DeviceEnv, suite: Sequence[Task],
                 dataset: Sequence[LoadedRecord],
                 config: TrainConfig = TrainConfig(),
                 grpo: GrpoConfig = GrpoConfig(),
                 tol: ToleranceConfig = ToleranceConfig()):
        if not dataset:
            raise ContractViolation("dataset must be non-empty")
        self.env = env
        self.suite = list(suite)
        self.dataset = list(dataset)
        self.config = config
        self.grpo = grpo
        self.tol = tol
        self.vocab = build_vocabulary([t.instruction for t in suite],
                                      env.library.all_labels())
        self.encoder = ContextEncoder(config.feature_dim, self.vocab)
        self.grammar = make_grammar(self.vocab, "low")
        self.params = init_params(_rng_for(config.seed, 10), config.feature_dim,
                                  self.vocab.size, "low")
        self._ref = self.params.copy()
        self._adam = AdamState.for_params(self.params)
        self._ctx_cache: dict[int, EncodedContext] = {}
        self.counters: dict[str, Any] = {"samples": 0}

    def _ctx(self, idx: int) -> EncodedContext:
        ctx = self._ctx_cache.get(idx)
        if ctx is None:
            rec = self.dataset[idx]
            ctx = self.encoder.encode_base(rec.screen, rec.record.problem)
            self._ctx_cache[idx] = ctx
        return ctx

    def collect_group(self, idx: int, rng: np.random.Generator,
                      ref_params: PolicyParams) -> GroupBatch:
        rec = self.dataset[idx]
        ctx = self._ctx(idx)
        cfg = replace(self.config.decoding_low, group_size=self.config.group_size)
        members = []
        for _ in range(self.config.group_size):
            seq, logps = sample_sequence(self.params, ctx, self.grammar, cfg, rng)
            try:
                reward = env_reward(decode_action(seq, self.vocab),
                                    rec.oracle_action, self.tol)
            except ActionParseError:
                reward = 0
            ref_logps = logps if ref_params is self.params else \
                sequence_logprob(ref_params, ctx, self.grammar, seq)
            members.append(GroupMember(seq, logps, ref_logps, 0.0, float(reward)))
        if self.config.low_level_norm == "group":
            advs = normalize_group([m.reward for m in members], self.config.sigma_floor)
            for m, adv in zip(members, advs):
                m.advantage = float(adv)
        self.counters["samples"] += len(members)
        return GroupBatch(ctx, self.grammar, members, ref_params)

    def train(self, sample_budget: int | None = None,
              on_iteration: Callable[[IterationStats], None] | None = None
              ) -> list[IterationStats]:
        stats_log: list[IterationStats] = []
        k = 0
        while True:
            k += 1
            if sample_budget is not None and self.counters["samples"] >= sample_budget:
                break
            if sample_budget is None and k > self.config.iterations:
                break
            rng = _rng_for(self.config.seed, 11, k)
            ref = self.params if self.config.ref_refresh == "iteration" else self._ref
            n = len(self.dataset)
            take = min(self.config.batch_records, n)
            cycle, offset = divmod((k - 1) * take, n)
            order = _rng_for(self.config.seed, 12, cycle).permutation(n)
            idxs = [int(order[(offset + j) % n]) for j in range(take)]
            groups = [self.collect_group(i, rng, ref) for i in idxs]
            if self.config.low_level_norm == "batch":
                members = [m for g in groups for m in g.members]
                advs = normalize_group([m.reward for m in members],
                                       self.config.sigma_floor)
                for m, adv in zip(members, advs):
                    m.advantage = float(adv)
            stats = IterationStats(iteration=k)
            stats.rollouts_low = sum(len(g.members) for g in groups)
            stats.mean_low_reward = float(np.mean(
                [m.reward for g in groups for m in g.members]))
            grad_norm = float("nan")
            for _ in range(self.grpo.epochs):
                grad = loss_gradient(self.params, groups, self.grpo)
                grad_norm = grad.norm()
                if self.grpo.optimizer == "adam":
                    self.params = apply_adam_update(self.params, grad, self.grpo,
                                                    self._adam)
                else:
                    self.params = apply_update(self.params, grad, self.grpo)
            stats.grad_norm_low = grad_norm
            if self.config.probe_every and k % self.config.probe_every == 0:
                stats.probe_success = evaluate_policy(
                    self.env, self.suite, self.flat_actor(),
                    max_steps=self.config.max_episode_steps).success_rate
            stats_log.append(stats)
            if on_iteration is not None:
                on_iteration(stats)
            if stats.probe_success == stats.probe_success and \
                    self.config.target_success is not None and \
                    stats.probe_success >= self.config.target_success:
                break
        return stats_log

    def flat_actor(self) -> "Actor":
        return make_flat_actor(self.encoder, self.vocab, self.grammar, self.params,
                               self.config.decoding_low.max_length)


# -- evaluation ------------------------------------------------------------------

Actor = Callable[[ScreenState, str], tuple[AtomicAction | None, str | None]]


def make_hier_actor(encoder: ContextEncoder, vocab: Vocabulary, grammar_high,
                    grammar_low, params_h: PolicyParams, params_l: PolicyParams,
                    max_len_high: int = 256, max_len_low: int = 64) -> Actor:
    """Greedy planner + executor: subgoal is regenerated from every screen."""

    def act(screen: ScreenState, instruction: str):
        ctx_h = encoder.encode_base(screen, instruction)
        subgoal_seq = greedy_sequence(params_h, ctx_h, grammar_high, max_len_high)
        text = decode_subgoal(subgoal_seq, vocab)
        body = extract_instruction_body(text) or text
        ctx_l = encoder.encode_base(screen, body)
        action_seq = greedy_sequence(params_l, ctx_l, grammar_low, max_len_low)
        try:
            return decode_action(action_seq, vocab), body
        except ActionParseError:
            return None, body

    return act


def make_flat_actor(encoder: ContextEncoder, vocab: Vocabulary, grammar,
                    params: PolicyParams, max_len: int = 64) -> Actor:
    def act(screen: ScreenState, instruction: str):
        ctx = encoder.encode_base(screen, instruction)
        seq = greedy_sequence(params, ctx, grammar, max_len)
        try:
            return decode_action(seq, vocab), None
        except ActionParseError:
            return None, None

    return act


@dataclass
class EvalReport:
    success_rate: float
    outcomes: list[dict[str, Any]]
    tally: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {"success_rate": self.success_rate, "outcomes": self.outcomes,
                "tally": self.tally}


def intended_apps(env: DeviceEnv, task: Task) -> set[str]:
    apps = {"launcher"}
    launcher = env.library.data["launcher"]["screens"]
    icon_to_app = {}
    for screen in launcher.values():
        for el in screen["elements"]:
            for eff in el.get("on_tap", []):
                if eff.get("op") == "open_app":
                    icon_to_app[el["id"]] = eff["app"]
    for step in task.plan:
        if step.get("target") in icon_to_app:
            apps.add(icon_to_app[step["target"]])
    return apps


def classify_failure(env: DeviceEnv, task: Task, state, result,
                     actions: list[AtomicAction | None]) -> str:
    """Map a failed episode onto the five-category taxonomy.

    Precedence (documented, configurable via reordering here): deliberate
    early completion; stalls; repeated identical actions; drifting into an
    app the oracle never visits; everything else.
    """
    if result is not None and result.info == "premature":
        return "premature-termination"
    if state.stalled_steps > 0:
        return "external-dependency/latency"
    if len(actions) >= 3 and actions[-1] is not None \
            and actions[-1] == actions[-2] == actions[-3]:
        return "complex-ui/missing-target"
    if state.top()[0] not in intended_apps(env, task):
        return "incorrect-navigation"
    return "goal-misunderstanding"


def evaluate_policy(env: DeviceEnv, suite: Sequence[Task], actor: Actor,
                    layout_mode: str = "home", max_steps: int | None = None,
                    seed: int = 0) -> EvalReport:
    """Greedy episode rollouts with success rate and failure taxonomy."""
    outcomes = []
    tally: dict[str, int] = {tag: 0 for tag in FAILURE_TAGS}
    wins = 0
    for task in suite:
        state = env.reset(task.id, layout_mode, seed)
        budget = max_steps if max_steps is not None else task.max_steps
        actions: list[AtomicAction | None] = []
        result = None
        success = False
        for _ in range(budget):
            screen = env.observe(state)
            action, _ = actor(screen, task.instruction)
            actions.append(action)
            if action is None:
                break
            state, result = env.step(state, action)
            if result.terminated:
                success = result.success
                break
        outcome: dict[str, Any] = {"task": task.id, "success": success,
                                   "steps": state.step_count}
        if success:
            wins += 1
        else:
            tag = classify_failure(env, task, state, result, actions)
            outcome["failure"] = tag
            tally[tag] += 1
        outcomes.append(outcome)
    rate = wins / len(suite) if suite else 0.0
    return EvalReport(rate, outcomes, tally)


# -- group-size stability study ----------------------------------------------------

def advantage_variance_study(trainer: HierTrainer, record_idx: int,
                             group_sizes: Sequence[int] = (2, 4, 6, 8),
                             resamples: int = 100, seed: int = 0) -> dict[int, float]:
    """Variance of the normalized advantage of one held-fixed subgoal when the
    rest of its group is resampled, per group size."""
    rec = trainer.dataset[record_idx]
    ctx = trainer._ctx(record_idx, rec.screen, rec.record.problem)
    rng = _rng_for(seed, 99)

    def sample_reward() -> float:
        seq, _ = sample_sequence(trainer.params_h, ctx, trainer.grammar_high,
                                 trainer.config.decoding_high, rng)
        text = decode_subgoal(seq, trainer.vocab)
        r_fmt = format_reward(text)
        r_judge = judge_feasibility(rec.screen, text).reward
        return foresight_reward(r_fmt, 0, r_judge, trainer.weights).r_total

    # Pick a probe output whose reward is nonzero so its advantage reacts to
    # the group around it.
    probe = 0.0
    for _ in range(500):
        probe = sample_reward()
        if probe > 0:
            break
    out: dict[int, float] = {}
    for g in group_sizes:
        advs = []
        for _ in range(resamples):
            rewards = [probe] + [sample_reward() for _ in range(g - 1)]
            advs.append(normalize_group(rewards, trainer.config.sigma_floor)[0])
        out[g] = float(np.var(advs))
    return out
