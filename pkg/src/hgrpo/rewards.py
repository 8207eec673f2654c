"""Reward components and group-relative advantage normalization.

Four pieces: the schema format reward, the oracle-match environment reward
with its coordinate tolerance, the rule-oracle feasibility judge (a
deterministic stand-in for the remote LLM judge, same decision rules), and
the weighted foresight combination. Advantages normalize rewards by the
group's population statistics, with a variance floor that zeroes degenerate
groups.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from hgrpo.env.types import ActionType, AtomicAction, ScreenState
from hgrpo.errors import ContractViolation

logger = logging.getLogger(__name__)

FORMAT_RE = re.compile(
    r"^\s*<reasoning>(?P<reason>.+?)</reasoning>\s*"
    r"<instruction>Instruction:(?P<body>.+?)</instruction>\s*$",
    re.DOTALL,
)

_INSTR_BODY_RE = re.compile(
    r"<instruction>\s*Instruction:(?P<body>.*?)(?:</instruction>|$)", re.DOTALL)

ACTION_VERBS = {
    "click", "tap", "press", "open", "select", "launch", "type", "enter",
    "input", "swipe", "scroll", "search", "go", "navigate", "send", "set",
    "turn", "terminate", "complete", "finish", "mark", "shop",
}
TYPE_VERBS = {"type", "input"}
TARGETED_VERBS = {"click", "tap", "press", "open", "select", "launch"}
_STOPWORDS = {
    "the", "a", "an", "on", "in", "to", "for", "of", "with", "at", "into",
    "icon", "button", "tab", "field", "bar", "app", "task", "status", "screen",
}

JUDGE_RULES = ("atomicity", "context-match", "keyboard-state", "target-existence")


@dataclass(frozen=True)
class RewardWeights:
    lambda_fmt: float = 0.4
    lambda_env: float = 0.3
    lambda_judge: float = 0.3

    def __post_init__(self) -> None:
        vals = (self.lambda_fmt, self.lambda_env, self.lambda_judge)
        if any(v < 0 for v in vals):
            raise ContractViolation("reward weights must be non-negative")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ContractViolation("reward weights must sum to 1")


@dataclass(frozen=True)
class ToleranceConfig:
    epsilon: float = 0.002
    sigma_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.sigma_floor <= 0:
            raise ContractViolation("tolerances must be positive")


@dataclass(frozen=True)
class JudgeVerdict:
    reward: int
    violated_rule: str | None = None

    def __post_init__(self) -> None:
        if (self.reward == 1) != (self.violated_rule is None):
            raise ContractViolation("reward 1 iff no violated rule")


@dataclass(frozen=True)
class RewardBreakdown:
    r_fmt: int
    r_env: int
    r_judge: int
    r_total: float


def format_reward(subgoal_text: str) -> int:
    """1 iff the text is exactly the reasoning+instruction schema."""
    m = FORMAT_RE.match(subgoal_text)
    if not m:
        return 0
    if not m.group("reason").strip() or not m.group("body").strip():
        return 0
    return 1


def extract_instruction_body(subgoal_text: str) -> str | None:
    """Instruction body of a schema text; bare text is its own body."""
    if "<instruction>" in subgoal_text or "<reasoning>" in subgoal_text:
        m = _INSTR_BODY_RE.search(subgoal_text)
        if not m or not m.group("body").strip():
            return None
        return m.group("body").strip()
    return subgoal_text.strip() or None


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def env_reward(predicted: AtomicAction, oracle: AtomicAction,
               tol: ToleranceConfig) -> int:
    """1 iff types match and coordinates/text match within tolerance.

    Taps compare touch points only (strictly < epsilon, normalized L2);
    swipes compare touch and lift; TYPE compares text case-insensitively
    after whitespace normalization; the rest compare type alone.
    """
    predicted.validate()
    oracle.validate()
    if predicted.action_type != oracle.action_type:
        return 0
    if oracle.action_type == ActionType.DUAL_POINT:
        if _dist(predicted.touch_point, oracle.touch_point) >= tol.epsilon:
            return 0
        if not oracle.is_tap():  # swipes also pin the lift point
            if _dist(predicted.lift_point, oracle.lift_point) >= tol.epsilon:
                return 0
        return 1
    if oracle.action_type == ActionType.TYPE:
        norm = lambda s: " ".join(s.lower().split())
        return 1 if norm(predicted.typed_text) == norm(oracle.typed_text) else 0
    return 1


def _verbs_in(tokens: list[str]) -> list[str]:
    """First token plus any verb directly following a sequencing connective."""
    verbs = []
    if tokens and tokens[0] in ACTION_VERBS:
        verbs.append(tokens[0])
    for prev, tok in zip(tokens, tokens[1:]):
        if prev in ("and", "then") and tok in ACTION_VERBS:
            verbs.append(tok)
    return verbs


def judge_feasibility(screen: ScreenState, subgoal_text: str) -> JudgeVerdict:
    """Deterministic rule oracle for subgoal feasibility.

    Rules, in order: the instruction must be one atomic action; it must be
    actionable on this screen; type instructions need the keyboard up; a
    referenced element must exist. Relevance to the task is deliberately not
    judged (a valid but unrelated action still earns 1).
    """
    body = extract_instruction_body(subgoal_text)
    if body is None:
        return JudgeVerdict(0, "atomicity")
    tokens = body.lower().split()
    if not tokens or tokens[0] not in ACTION_VERBS:
        return JudgeVerdict(0, "atomicity")
    if "then" in tokens or len(_verbs_in(tokens)) > 1:
        return JudgeVerdict(0, "atomicity")
    verb = tokens[0]
    labels = [el.label.lower() for el in screen.visible_elements()]

    if verb in TYPE_VERBS:
        if not screen.keyboard_visible:
            return JudgeVerdict(0, "keyboard-state")
        if not any(el.kind == "text-field" for el in screen.visible_elements()):
            return JudgeVerdict(0, "context-match")
        return JudgeVerdict(1)

    if verb in TARGETED_VERBS:
        if not labels:
            return JudgeVerdict(0, "context-match")
        targets = [t for t in tokens[1:] if t not in _STOPWORDS]
        if not targets:
            return JudgeVerdict(0, "target-existence")
        for t in targets:
            if any(t in lbl or lbl in t for lbl in labels):
                return JudgeVerdict(1)
        return JudgeVerdict(0, "target-existence")

    return JudgeVerdict(1)


def foresight_reward(r_fmt: int, r_env: int, r_judge: int,
                     weights: RewardWeights) -> RewardBreakdown:
    for r in (r_fmt, r_env, r_judge):
        if r not in (0, 1):
            raise ContractViolation("component rewards must be binary")
    total = (weights.lambda_fmt * r_fmt + weights.lambda_env * r_env
             + weights.lambda_judge * r_judge)
    return RewardBreakdown(r_fmt, r_env, r_judge, total)


def normalize_group(rewards: Sequence[float], sigma_floor: float = 1e-6) -> np.ndarray:
    """(r - mean) / population std; all zeros when the group is degenerate."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractViolation("advantage normalization needs a group of >= 2")
    mu = r.mean()
    sigma = r.std()  # population convention
    if sigma < sigma_floor:
        return np.zeros_like(r)
    return (r - mu) / sigma


# -- pluggable remote judge ----------------------------------------------------

class RemoteJudge:
    """Protocol adapter for an external judge.

    Request: JSON {"screen": <canonical screen json>, "instruction": text}.
    Response: strict JSON {"reward": 0|1}. Any transport failure, timeout, or
    malformed response yields reward 0 and a logged latency-taxonomy tag.
    """

    def __init__(self, transport: Callable[[str], str], timeout_s: float = 5.0):
        self.transport = transport
        self.timeout_s = timeout_s

    def __call__(self, screen: ScreenState, instruction: str) -> JudgeVerdict:
        request = json.dumps({"screen": screen.to_dict(), "instruction": instruction},
                             sort_keys=True)
        start = time.monotonic()
        try:
            raw = self.transport(request)
        except Exception as exc:  # transport errors are data, not crashes
            logger.warning("remote judge failed (external-dependency/latency): %s", exc)
            return JudgeVerdict(0, "context-match")
        if time.monotonic() - start > self.timeout_s:
            logger.warning("remote judge timed out (external-dependency/latency)")
            return JudgeVerdict(0, "context-match")
        try:
            reward = int(json.loads(raw)["reward"])
            if reward not in (0, 1):
                raise ValueError(raw)
        except Exception as exc:
            logger.warning("remote judge returned malformed payload: %s", exc)
            return JudgeVerdict(0, "context-match")
        return JudgeVerdict(reward, None if reward == 1 else "context-match")
