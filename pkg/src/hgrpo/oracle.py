"""Scripted hierarchical oracle and the trajectory-record store.

The oracle walks a task's plan template against the live device: subgoals are
rendered from the current screen's labels, actions are grounded at element box
centers, so the same plan produces correct coordinates under either icon
layout. Records persist in the structured JSON schema with image_path /
problem / instruction / solution fields and 4-decimal fixed-point coordinates.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from hgrpo.env.device import DeviceEnv
from hgrpo.env.types import ActionType, AtomicAction, DeviceState, ScreenState
from hgrpo.errors import ContractViolation, PipelineError
from hgrpo.rewards import format_reward
from hgrpo.tasks import Task

REASONING_TEMPLATE = "the next step is to {body}"


@dataclass(frozen=True)
class TrajectoryRecord:
    image_path: str
    problem: str
    instruction: str
    solution: dict[str, Any]

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ContractViolation("record instruction must be non-empty")

    def action(self) -> AtomicAction:
        return AtomicAction.from_dict(self.solution)


@dataclass(frozen=True)
class OracleConfig:
    # Fraction of each first-tap-target group that also gets an all-apps
    # trajectory; keeps every launcher icon covered under the shifted layout.
    all_apps_fraction: float = 0.25
    verify: bool = True


def wrap_schema(body: str) -> str:
    reasoning = REASONING_TEMPLATE.format(body=body)
    return f"<reasoning>{reasoning}</reasoning><instruction>Instruction: {body}</instruction>"


def render_step(env: DeviceEnv, screen: ScreenState, step: dict[str, Any],
                task: Task) -> tuple[str, AtomicAction]:
    """(subgoal body, grounded action) for one plan step on this screen."""
    kind = step["kind"]
    if kind == "click":
        el = screen.find(step["target"])
        if el is None or not el.visible:
            raise PipelineError(
                f"task {task.id!r}: plan target {step['target']!r} absent from "
                f"screen {screen.screen_id!r}")
        return f"click {el.label.lower()}", AtomicAction.tap(el.center())
    if kind == "type":
        return f"type {step['text']}", AtomicAction.type_text(step["text"])
    if kind == "enter":
        return "press enter", AtomicAction(ActionType.PRESS_ENTER)
    if kind == "terminate":
        return "terminate the task", AtomicAction(ActionType.STATUS_COMPLETE)
    raise PipelineError(f"unknown plan step kind {kind!r}")


def oracle_step(env: DeviceEnv, state: DeviceState, task: Task) -> tuple[str, AtomicAction]:
    """Next oracle subgoal (full schema text) and grounded action.

    The plan index is the state's step count: oracle rollouts execute their
    own actions, so the counter tracks plan progress exactly.
    """
    if state.step_count >= len(task.plan):
        raise ContractViolation(f"task {task.id!r} already complete")
    if state.done:
        raise ContractViolation("oracle_step on a terminated state")
    body, action = render_step(env, env.observe(state), task.plan[state.step_count], task)
    schema = wrap_schema(body)
    assert format_reward(schema) == 1
    return schema, action


# -- dataset generation --------------------------------------------------------

def _layout_plan(suite: Sequence[Task], config: OracleConfig) -> list[tuple[Task, str]]:
    jobs = [(t, "home") for t in suite]
    if config.all_apps_fraction > 0:
        groups: dict[str, list[Task]] = {}
        for t in suite:
            first = t.plan[0].get("target", "") if t.plan else ""
            groups.setdefault(first, []).append(t)
        for members in groups.values():
            take = max(1, round(config.all_apps_fraction * len(members)))
            jobs.extend((t, "all-apps") for t in members[:take])
    return jobs


def generate_dataset(env: DeviceEnv, suite: Sequence[Task], out_dir: str | Path,
                     config: OracleConfig = OracleConfig(), seed: int = 0
                     ) -> tuple[list[TrajectoryRecord], dict[str, Any]]:
    """Roll the oracle over the suite, writing screens and validated records.

    Trajectories that fail to reach their goal on replay are dropped and
    reported rather than persisted.
    """
    out_dir = Path(out_dir)
    (out_dir / "screens").mkdir(parents=True, exist_ok=True)
    records: list[TrajectoryRecord] = []
    report: dict[str, Any] = {"generated": 0, "dropped": [], "per_task": {}, "seed": seed}

    for task, layout in _layout_plan(suite, config):
        state = env.reset(task.id, layout, seed)
        taken: list[TrajectoryRecord] = []
        success = False
        try:
            for step_idx in range(len(task.plan)):
                screen = env.observe(state)
                schema, action = oracle_step(env, state, task)
                body = extract_body(schema)
                rel = f"screens/{task.id}__{layout}__{step_idx:02d}.json"
                (out_dir / rel).write_text(
                    json.dumps(screen.to_dict(), sort_keys=True, indent=2) + "\n")
                taken.append(TrajectoryRecord(
                    image_path=rel, problem=task.instruction,
                    instruction=body, solution=action.to_dict()))
                state, result = env.step(state, action)
                if result.terminated:
                    success = result.success
                    break
        except PipelineError as exc:
            report["dropped"].append({"task": task.id, "layout": layout,
                                      "reason": str(exc)})
            continue
        if config.verify and not success:
            report["dropped"].append({"task": task.id, "layout": layout,
                                      "reason": "replay did not reach the goal"})
            continue
        records.extend(taken)
        key = f"{task.id}@{layout}"
        report["per_task"][key] = len(taken)
    report["generated"] = len(records)
    persist_records(records, out_dir / "records.json")
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return records, report


def extract_body(schema_text: str) -> str:
    m = re.search(r"<instruction>\s*Instruction:\s*(.*?)\s*</instruction>",
                  schema_text, re.DOTALL)
    if not m:
        raise PipelineError("oracle schema text missing instruction body")
    return m.group(1)


# -- persistence ----------------------------------------------------------------

_SOLUTION_ORDER = ("action_type", "touch_point", "lift_point", "typed_text", "long_press")


def _fmt_point(p: Sequence[float]) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in p) + "]"


def _record_json(rec: TrajectoryRecord) -> str:
    sol_parts = []
    for key in _SOLUTION_ORDER:
        if key not in rec.solution:
            continue
        value = rec.solution[key]
        if key in ("touch_point", "lift_point"):
            rendered = _fmt_point(value)
        else:
            rendered = json.dumps(value)
        sol_parts.append(f'      "{key}": {rendered}')
    solution = "{\n" + ",\n".join(sol_parts) + "\n    }"
    return (
        "  {\n"
        f'    "image_path": {json.dumps(rec.image_path)},\n'
        f'    "problem": {json.dumps(rec.problem)},\n'
        f'    "instruction": {json.dumps(rec.instruction)},\n'
        f'    "solution": {solution}\n'
        "  }"
    )


def records_to_json(records: Sequence[TrajectoryRecord]) -> str:
    """Canonical text form: 4-decimal coordinates, fixed field order."""
    if not records:
        return "[]\n"
    return "[\n" + ",\n".join(_record_json(r) for r in records) + "\n]\n"


def persist_records(records: Sequence[TrajectoryRecord], path: str | Path) -> None:
    Path(path).write_text(records_to_json(records))


def _canon_solution(sol: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in _SOLUTION_ORDER:
        if key not in sol:
            continue
        value = sol[key]
        if key in ("touch_point", "lift_point"):
            value = [round(float(v), 4) for v in value]
        out[key] = value
    return out


def load_records(path: str | Path) -> list[TrajectoryRecord]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"malformed record file at line {exc.lineno}: {exc.msg}")
    return [TrajectoryRecord(
        image_path=d["image_path"], problem=d["problem"],
        instruction=d["instruction"], solution=_canon_solution(d["solution"]))
        for d in raw]


_DECISION_RE = re.compile(
    r"action_type:\s*(?P<type>[A-Z_]+)"
    r"(?:.*?touch_point:\s*\[(?P<tx>[\d.]+),\s*(?P<ty>[\d.]+)\])?"
    r"(?:.*?lift_point:\s*\[(?P<lx>[\d.]+),\s*(?P<ly>[\d.]+)\])?"
    r"(?:.*?typed_text:\s*\"(?P<text>[^\"]*)\")?",
    re.DOTALL,
)


def parse_action_decision(text: str) -> AtomicAction:
    """Parse the quoted textual solution form ("Action Decision: {...}")."""
    m = _DECISION_RE.search(text)
    if not m:
        raise ContractViolation("unrecognized action-decision text")
    at = ActionType(m.group("type"))
    if at == ActionType.DUAL_POINT:
        touch = (float(m.group("tx")), float(m.group("ty")))
        lift = (float(m.group("lx")), float(m.group("ly"))) if m.group("lx") else touch
        return AtomicAction(at, touch_point=touch, lift_point=lift)
    if at == ActionType.TYPE:
        return AtomicAction.type_text(m.group("text") or "")
    return AtomicAction(at)


# -- validation -----------------------------------------------------------------

def validate_record(record: TrajectoryRecord, base_dir: str | Path,
                    env: DeviceEnv | None = None) -> list[str]:
    """Check one record; violations are returned, never raised."""
    violations: list[str] = []
    action = None
    try:
        action = record.action()
    except Exception as exc:
        violations.append(f"solution: {exc}")

    screen = None
    state_path = Path(base_dir) / record.image_path
    if not state_path.exists():
        violations.append(f"state-file: {record.image_path} missing")
    else:
        try:
            screen = ScreenState.from_dict(json.loads(state_path.read_text()))
        except Exception as exc:
            violations.append(f"state-file: {exc}")

    if format_reward(wrap_schema(record.instruction)) != 1:
        violations.append("format: instruction does not fit the schema when wrapped")

    if action is not None and screen is not None:
        sim = env or DeviceEnv()
        if action.action_type == ActionType.DUAL_POINT and action.is_tap():
            if sim.element_at(screen, action.touch_point) is None:
                violations.append("replay: tap hits no visible element")
        elif action.action_type == ActionType.TYPE and not screen.keyboard_visible:
            violations.append("replay: typing with keyboard hidden is a no-op")
    return violations
