"""Core data types of the simulated device: screens, elements, actions, step results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from hgrpo.errors import ContractViolation

Point = tuple[float, float]

ELEMENT_KINDS = ("icon", "button", "text-field", "list-item", "static-text")


class ActionType(str, Enum):
    DUAL_POINT = "DUAL_POINT"
    TYPE = "TYPE"
    PRESS_HOME = "PRESS_HOME"
    PRESS_BACK = "PRESS_BACK"
    PRESS_ENTER = "PRESS_ENTER"
    STATUS_COMPLETE = "STATUS_COMPLETE"


@dataclass(frozen=True)
class UiElement:
    """One on-screen element with a normalized-coordinate bounding box."""

    id: str
    kind: str
    label: str
    box: tuple[float, float, float, float]  # (x0, y0, x1, y1), each in [0, 1]
    visible: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ELEMENT_KINDS:
            raise ContractViolation(f"unknown element kind {self.kind!r}")
        if not self.label:
            raise ContractViolation("element label must be non-empty")
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ContractViolation(f"bad box {self.box} for element {self.id!r}")

    def contains(self, coord: Point) -> bool:
        x0, y0, x1, y1 = self.box
        return x0 <= coord[0] <= x1 and y0 <= coord[1] <= y1

    def center(self) -> Point:
        x0, y0, x1, y1 = self.box
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "label": self.label,
            "box": list(self.box),
            "visible": self.visible,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "UiElement":
        return cls(
            id=d["id"],
            kind=d["kind"],
            label=d["label"],
            box=tuple(d["box"]),
            visible=bool(d.get("visible", True)),
        )


@dataclass(frozen=True)
class ScreenState:
    """Symbolic rendering of one screen: the observation the policies consume."""

    elements: tuple[UiElement, ...]
    keyboard_visible: bool
    app_name: str
    screen_id: str
    focused_id: str | None = None

    def __post_init__(self) -> None:
        ids = [e.id for e in self.elements]
        if len(ids) != len(set(ids)):
            raise ContractViolation(f"duplicate element ids on screen {self.screen_id!r}")
        if self.keyboard_visible:
            focused = [e for e in self.elements if e.id == self.focused_id]
            if not focused or focused[0].kind != "text-field":
                raise ContractViolation("keyboard visible without a focused text-field")

    def visible_elements(self) -> tuple[UiElement, ...]:
        return tuple(e for e in self.elements if e.visible)

    def find(self, element_id: str) -> UiElement | None:
        for e in self.elements:
            if e.id == element_id:
                return e
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "app_name": self.app_name,
            "screen_id": self.screen_id,
            "keyboard_visible": self.keyboard_visible,
            "focused_id": self.focused_id,
            "elements": [e.to_dict() for e in self.elements],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScreenState":
        return cls(
            elements=tuple(UiElement.from_dict(e) for e in d["elements"]),
            keyboard_visible=bool(d["keyboard_visible"]),
            app_name=d["app_name"],
            screen_id=d["screen_id"],
            focused_id=d.get("focused_id"),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class AtomicAction:
    """One environment-level action.

    DUAL_POINT encodes taps (touch == lift), swipes (touch != lift) and, with
    long_press set, dwell taps. typed_text is populated only for TYPE.
    """

    action_type: ActionType
    touch_point: Point | None = None
    lift_point: Point | None = None
    typed_text: str = ""
    long_press: bool = False

    def validate(self) -> None:
        at = self.action_type
        if at == ActionType.DUAL_POINT:
            if self.touch_point is None or self.lift_point is None:
                raise ContractViolation("DUAL_POINT requires touch and lift points")
            for p in (self.touch_point, self.lift_point):
                if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
                    raise ContractViolation(f"coordinate {p} outside [0,1]^2")
            if self.typed_text:
                raise ContractViolation("DUAL_POINT must not carry typed_text")
        elif at == ActionType.TYPE:
            if not self.typed_text:
                raise ContractViolation("TYPE requires non-empty typed_text")
            if self.touch_point is not None or self.lift_point is not None:
                raise ContractViolation("TYPE must not carry coordinates")
        else:
            if self.touch_point is not None or self.lift_point is not None:
                raise ContractViolation(f"{at.value} must not carry coordinates")
            if self.typed_text:
                raise ContractViolation(f"{at.value} must not carry typed_text")

    def is_tap(self) -> bool:
        return (
            self.action_type == ActionType.DUAL_POINT
            and self.touch_point == self.lift_point
        )

    @classmethod
    def tap(cls, point: Point, long_press: bool = False) -> "AtomicAction":
        return cls(ActionType.DUAL_POINT, touch_point=point, lift_point=point,
                   long_press=long_press)

    @classmethod
    def swipe(cls, touch: Point, lift: Point) -> "AtomicAction":
        return cls(ActionType.DUAL_POINT, touch_point=touch, lift_point=lift)

    @classmethod
    def type_text(cls, text: str) -> "AtomicAction":
        return cls(ActionType.TYPE, typed_text=text)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"action_type": self.action_type.value}
        if self.touch_point is not None:
            d["touch_point"] = list(self.touch_point)
        if self.lift_point is not None:
            d["lift_point"] = list(self.lift_point)
        if self.typed_text:
            d["typed_text"] = self.typed_text
        if self.long_press:
            d["long_press"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AtomicAction":
        touch = tuple(d["touch_point"]) if "touch_point" in d else None
        lift = tuple(d["lift_point"]) if "lift_point" in d else touch
        action = cls(
            action_type=ActionType(d["action_type"]),
            touch_point=touch,
            lift_point=lift,
            typed_text=d.get("typed_text", ""),
            long_press=bool(d.get("long_press", False)),
        )
        action.validate()
        return action


@dataclass(frozen=True)
class StepResult:
    """Environment feedback for one step."""

    terminated: bool = False
    success: bool = False
    info: str | None = None

    def __post_init__(self) -> None:
        if self.success and not self.terminated:
            raise ContractViolation("success implies terminated")


@dataclass
class DeviceState:
    """Full mutable device state: screen stack, per-app scripted state, counters.

    One logical owner mutates a DeviceState; independent rollouts must use
    independent copies (see DeviceEnv.clone_state).
    """

    task_id: str
    layout_mode: str
    rng_seed: int
    # Back stack of (app_id, screen_id, params); bottom entry is the launcher.
    stack: list[tuple[str, str, dict[str, str]]] = field(default_factory=list)
    app_state: dict[str, Any] = field(default_factory=dict)
    focused_field: str | None = None  # element id of the focused text-field
    buffers: dict[str, str] = field(default_factory=dict)
    step_count: int = 0
    done: bool = False
    stalled_steps: int = 0

    def top(self) -> tuple[str, str, dict[str, str]]:
        return self.stack[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "layout_mode": self.layout_mode,
            "rng_seed": self.rng_seed,
            "stack": [[a, s, dict(sorted(p.items()))] for a, s, p in self.stack],
            "app_state": self.app_state,
            "focused_field": self.focused_field,
            "buffers": dict(sorted(self.buffers.items())),
            "step_count": self.step_count,
            "done": self.done,
            "stalled_steps": self.stalled_steps,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DeviceState":
        return cls(
            task_id=d["task_id"],
            layout_mode=d["layout_mode"],
            rng_seed=int(d["rng_seed"]),
            stack=[(a, s, dict(p)) for a, s, p in d["stack"]],
            app_state=d["app_state"],
            focused_field=d.get("focused_field"),
            buffers=dict(d.get("buffers", {})),
            step_count=int(d["step_count"]),
            done=bool(d.get("done", False)),
            stalled_steps=int(d.get("stalled_steps", 0)),
        )
