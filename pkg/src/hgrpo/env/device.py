"""Deterministic simulated mobile device.

The device interprets the declarative app library: taps are dispatched through
element hit-tests, typing fills the focused field's buffer, the enter key runs
the screen's commit effects. Every operation is a pure function of
(state, action), so replays are byte-identical.
"""

from __future__ import annotations

import copy
import re
from typing import Any

from hgrpo.env.apps import AppLibrary, parse_clock_time
from hgrpo.env.types import (
    ActionType,
    AtomicAction,
    DeviceState,
    Point,
    ScreenState,
    StepResult,
    UiElement,
)
from hgrpo.errors import ContractViolation, TaskNotFound

LAYOUT_MODES = ("home", "all-apps")

KEYBOARD_ENTER = {
    "id": "key-enter", "kind": "button", "label": "Enter",
    "box": [0.85, 0.85, 0.95, 0.95],
}

_PLACEHOLDER_RE = re.compile(r"\{([a-z0-9_.-]+)\}")


def _state_get(app_state: dict[str, Any], path: str) -> Any:
    node: Any = app_state
    for part in path.split("."):
        node = node[part]
    return node


def _state_set(app_state: dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node: Any = app_state
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


class DeviceEnv:
    """The interaction environment over an app library and a task registry.

    Tasks are dicts with keys: instruction, goal (predicate spec), plan
    (oracle step templates) and max_steps. DeviceState values are never shared
    between rollouts; ``clone_state`` hands out independent copies.
    """

    def __init__(self, library: AppLibrary | None = None,
                 tasks: dict[str, dict[str, Any]] | None = None,
                 stall_rate: float = 0.0):
        self.library = library or AppLibrary()
        self.tasks: dict[str, dict[str, Any]] = dict(tasks or {})
        # Optional stand-in for external latency: a deterministic fraction of
        # steps become no-ops that still consume budget.
        self.stall_rate = stall_rate

    def register_task(self, task_id: str, spec: dict[str, Any]) -> None:
        self.tasks[task_id] = spec

    # -- core operations ----------------------------------------------------

    def reset(self, task_id: str, layout_mode: str = "home", seed: int = 0) -> DeviceState:
        if task_id not in self.tasks:
            raise TaskNotFound(task_id)
        if layout_mode not in LAYOUT_MODES:
            raise ContractViolation(f"unknown layout mode {layout_mode!r}")
        return DeviceState(
            task_id=task_id,
            layout_mode=layout_mode,
            rng_seed=int(seed),
            stack=[("launcher", layout_mode, {})],
            app_state=self.library.initial_state(),
            focused_field=None,
            buffers={},
            step_count=0,
        )

    def observe(self, state: DeviceState) -> ScreenState:
        app_id, screen_id, _ = state.top()
        template = self.library.screen(app_id, screen_id)
        elements = []
        for el in template["elements"]:
            label = _PLACEHOLDER_RE.sub(
                lambda m: str(_state_get(state.app_state, m.group(1))), el["label"])
            elements.append(UiElement(
                id=el["id"], kind=el["kind"], label=label,
                box=tuple(el["box"]), visible=bool(el.get("visible", True)),
            ))
        keyboard = state.focused_field is not None
        if keyboard:
            elements.append(UiElement(
                id=KEYBOARD_ENTER["id"], kind=KEYBOARD_ENTER["kind"],
                label=KEYBOARD_ENTER["label"], box=tuple(KEYBOARD_ENTER["box"]),
            ))
        app_name = self.library.app(app_id)["display"] if app_id != "launcher" else "Home"
        return ScreenState(
            elements=tuple(elements),
            keyboard_visible=keyboard,
            app_name=app_name,
            screen_id=screen_id,
            focused_id=state.focused_field if keyboard else None,
        )

    def element_at(self, screen: ScreenState, coord: Point) -> UiElement | None:
        if not (0.0 <= coord[0] <= 1.0 and 0.0 <= coord[1] <= 1.0):
            raise ContractViolation(f"coordinate {coord} outside [0,1]^2")
        hit = None
        for el in screen.elements:  # later elements render on top
            if el.visible and el.contains(coord):
                hit = el
        return hit

    def step(self, state: DeviceState, action: AtomicAction) -> tuple[DeviceState, StepResult]:
        action.validate()
        if state.done:
            raise ContractViolation("step on a terminated state")

        nxt = self.clone_state(state)
        nxt.step_count += 1

        if self._stalled(state):
            nxt.stalled_steps += 1
            return self._finish(nxt, StepResult(info="stall"))

        at = action.action_type
        if at == ActionType.STATUS_COMPLETE:
            nxt.done = True
            success = self.goal_check(state, self.tasks[state.task_id])
            info = None if success else "premature"
            return nxt, StepResult(terminated=True, success=success, info=info)

        if at == ActionType.DUAL_POINT:
            screen = self.observe(state)
            el = self.element_at(screen, action.touch_point)
            if action.is_tap() and el is not None:
                self._apply_effects(nxt, self._tap_effects(state, el.id))
            # Swipes and empty-region taps are no-ops: no scripted transition
            # fires without an element hit.
        elif at == ActionType.TYPE:
            if state.focused_field is not None:
                buf = nxt.buffers.get(nxt.focused_field, "")
                nxt.buffers[nxt.focused_field] = (
                    buf + " " + action.typed_text if buf else action.typed_text)
        elif at == ActionType.PRESS_ENTER:
            if state.focused_field is not None:
                app_id, screen_id, _ = state.top()
                template = self.library.screen(app_id, screen_id)
                self._apply_effects(nxt, template.get("on_enter_key", []))
        elif at == ActionType.PRESS_HOME:
            nxt.stack = [("launcher", nxt.layout_mode, {})]
            nxt.focused_field = None
        elif at == ActionType.PRESS_BACK:
            if len(nxt.stack) > 1:
                nxt.stack.pop()
            nxt.focused_field = None

        return self._finish(nxt, StepResult())

    def goal_check(self, state: DeviceState, task: dict[str, Any]) -> bool:
        if task is not self.tasks.get(state.task_id) and \
                task.get("id", state.task_id) != state.task_id:
            raise ContractViolation("task does not match the state's task_id")
        return self._eval_pred(state, task["goal"])

    # -- helpers ------------------------------------------------------------

    def clone_state(self, state: DeviceState) -> DeviceState:
        return copy.deepcopy(state)

    def max_steps(self, task_id: str) -> int:
        return int(self.tasks[task_id]["max_steps"])

    def _finish(self, nxt: DeviceState, result: StepResult) -> tuple[DeviceState, StepResult]:
        if nxt.step_count >= self.max_steps(nxt.task_id) and not result.terminated:
            nxt.done = True
            return nxt, StepResult(terminated=True, success=False, info="step-overflow")
        return nxt, result

    def _stalled(self, state: DeviceState) -> bool:
        if self.stall_rate <= 0.0:
            return False
        # Deterministic per (seed, step) so replays stay byte-identical.
        mix = (state.rng_seed * 2654435761 + state.step_count * 40503) % 1000
        return mix < self.stall_rate * 1000

    def _tap_effects(self, state: DeviceState, element_id: str) -> list[dict[str, Any]]:
        if element_id == KEYBOARD_ENTER["id"]:
            app_id, screen_id, _ = state.top()
            return self.library.screen(app_id, screen_id).get("on_enter_key", [])
        app_id, screen_id, _ = state.top()
        for el in self.library.screen(app_id, screen_id)["elements"]:
            if el["id"] == element_id:
                return el.get("on_tap", [])
        return []

    def _apply_effects(self, state: DeviceState, effects: list[dict[str, Any]]) -> None:
        for eff in effects:
            op = eff["op"]
            if op == "open_app":
                app = self.library.app(eff["app"])
                state.stack.append((eff["app"], app["entry"], {}))
                state.focused_field = None
            elif op == "goto":
                app_id = state.top()[0]
                state.stack.append((app_id, eff["screen"], {}))
                state.focused_field = None
            elif op == "back":
                if len(state.stack) > 1:
                    state.stack.pop()
                state.focused_field = None
            elif op == "focus":
                state.focused_field = eff["field"]
            elif op == "blur":
                state.focused_field = None
            elif op == "set_from_buffer":
                _state_set(state.app_state, eff["path"],
                           state.buffers.get(eff["field"], ""))
            elif op == "list_add":
                value = self._resolve_value(state, eff["value"])
                if value is not None:
                    _state_get(state.app_state, eff["path"]).append(value)
            elif op == "set_text":
                value = self._resolve_value(state, eff["value"])
                if value is not None:
                    _state_set(state.app_state, eff["path"], value)
            elif op == "toggle":
                _state_set(state.app_state, eff["path"],
                           not bool(_state_get(state.app_state, eff["path"])))
            elif op == "clear_buffer":
                state.buffers.pop(eff["field"], None)
            else:
                raise ContractViolation(f"unknown effect op {op!r}")

    def _resolve_value(self, state: DeviceState, spec: Any) -> Any:
        if isinstance(spec, dict):
            if "buffer" in spec:
                return state.buffers.get(spec["buffer"], "")
            if "lit" in spec:
                return spec["lit"]
            if "time_from_buffer" in spec:
                return parse_clock_time(state.buffers.get(spec["time_from_buffer"], ""))
            if "join_list" in spec:
                items = _state_get(state.app_state, spec["join_list"])
                return ",".join(str(x) for x in items) if items else "none"
            resolved = {k: self._resolve_value(state, v) for k, v in spec.items()}
            if any(v is None for v in resolved.values()):
                return None
            return resolved
        return spec

    def _eval_pred(self, state: DeviceState, pred: dict[str, Any]) -> bool:
        kind = pred["pred"]
        if kind == "all":
            return all(self._eval_pred(state, p) for p in pred["of"])
        if kind == "screen_is":
            app_id, screen_id, _ = state.top()
            return app_id == pred["app"] and screen_id == pred["screen"]
        if kind == "state_equals":
            return _state_get(state.app_state, pred["path"]) == pred["value"]
        if kind == "list_contains":
            return pred["value"] in _state_get(state.app_state, pred["path"])
        raise ContractViolation(f"unknown goal predicate {kind!r}")
