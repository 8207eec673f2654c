"""Task definitions, skewed suite construction, splits and overlap measurement.

A task couples a natural-language instruction with a goal predicate the
device can evaluate and an oracle plan the data pipeline can execute. The
suite builder reproduces the search-heavy category skew knob; splits measure
overlap by task id (instruction-template identity, never trajectories).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from hgrpo.errors import ContractViolation

CATEGORIES = ("search", "app-open", "procedural", "messaging", "shopping-like")


@dataclass(frozen=True)
class Task:
    id: str
    instruction: str
    category: str
    goal: dict[str, Any]
    plan: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ContractViolation("task instruction must be non-empty")
        if self.category not in CATEGORIES:
            raise ContractViolation(f"unknown category {self.category!r}")

    @property
    def max_steps(self) -> int:
        # Budget rule: twice the oracle trajectory length.
        return 2 * len(self.plan)

    def env_spec(self) -> dict[str, Any]:
        return {"id": self.id, "instruction": self.instruction, "goal": self.goal,
                "plan": self.plan, "max_steps": self.max_steps}

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "instruction": self.instruction,
                "category": self.category, "goal": self.goal, "plan": self.plan}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Task":
        return cls(id=d["id"], instruction=d["instruction"], category=d["category"],
                   goal=d["goal"], plan=d["plan"])


@dataclass(frozen=True)
class SuiteConfig:
    total_count: int = 24
    search_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_count < 1:
            raise ContractViolation("total_count must be >= 1")
        if not 0.0 <= self.search_fraction <= 1.0:
            raise ContractViolation("search_fraction must lie in [0, 1]")


# -- template banks ----------------------------------------------------------

def _click(target: str) -> dict[str, Any]:
    return {"kind": "click", "target": target}


def _type(text: str) -> dict[str, Any]:
    return {"kind": "type", "text": text}


_ENTER = {"kind": "enter"}
_TERMINATE = {"kind": "terminate"}


def make_search_task(subject: str, city: str | None = None,
                     category: str = "search",
                     instruction: str | None = None,
                     task_id: str | None = None) -> Task:
    query = f"{subject} in {city}" if city else subject
    if task_id is None:
        task_id = f"search.{subject}.{city}" if city else f"search.{subject}"
    if instruction is None:
        instruction = f"search for {query}"
    goal = {"pred": "all", "of": [
        {"pred": "state_equals", "path": "chrome.query", "value": query},
        {"pred": "screen_is", "app": "chrome", "screen": "chrome-results"},
    ]}
    plan = [_click("icon-chrome"), _click("search-bar"), _type(query),
            dict(_ENTER), dict(_TERMINATE)]
    return Task(task_id, instruction, category, goal, plan)


def make_shopping_task(product: str) -> Task:
    slug = product.replace(" ", "-")
    return make_search_task(
        subject=product, category="shopping-like",
        instruction=f"shop for {product} online",
        task_id=f"shop.{slug}")


def make_alarm_task(display_time: str, stored_time: str) -> Task:
    goal = {"pred": "list_contains", "path": "clock.alarms", "value": stored_time}
    plan = [_click("icon-clock"), _click("alarm-tab"), _click("add-alarm"),
            _type(display_time), _click("save-alarm"), dict(_TERMINATE)]
    return Task(f"alarm.{stored_time.replace(':', '')}",
                f"set an alarm for {display_time}", "procedural", goal, plan)


def make_toggle_task(setting: str, turn_on: bool) -> Task:
    item, toggle = f"{'wifi' if setting == 'wifi' else 'bt'}-item", \
        f"{'wifi' if setting == 'wifi' else 'bt'}-toggle"
    name = "wi-fi" if setting == "wifi" else "bluetooth"
    goal = {"pred": "state_equals", "path": f"settings.{setting}", "value": turn_on}
    plan = [_click("icon-settings"), _click(item), _click(toggle), dict(_TERMINATE)]
    return Task(f"settings.{setting}.{'on' if turn_on else 'off'}",
                f"turn {'on' if turn_on else 'off'} {name}", "procedural", goal, plan)


def make_message_task(name: str, text: str) -> Task:
    goal = {"pred": "list_contains", "path": "messenger.sent",
            "value": {"to": name, "text": text}}
    plan = [_click("icon-messages"), _click("new-chat"), _type(name),
            _click("msg-field"), _type(text), _click("send"), dict(_TERMINATE)]
    slug = text.split()[0]
    return Task(f"message.{name}.{slug}", f"send {text} to {name}",
                "messaging", goal, plan)


def make_open_task(task_id: str, instruction: str, icon: str, item: str,
                   app: str, screen: str) -> Task:
    goal = {"pred": "screen_is", "app": app, "screen": screen}
    plan = [_click(icon), _click(item), dict(_TERMINATE)]
    return Task(task_id, instruction, "app-open", goal, plan)


_SUBJECTS = ["weather", "hotels", "flights", "restaurants", "museums",
             "coffee", "parks", "trains", "pizza", "news"]
_CITIES = ["paris", "tokyo", "london", "berlin", "rome", "madrid",
           "sydney", "oslo", "dublin", "cairo"]
_SHORT_SUBJECTS = ["news", "weather", "flights", "pizza", "coffee", "trains"]
_PRODUCTS = ["shoes", "lamps", "backpacks", "headphones", "mugs", "posters"]
_ALARMS = [("4:00 pm", "16:00"), ("7:30 am", "07:30"), ("9:15 pm", "21:15"),
           ("6:45 am", "06:45"), ("12:30 pm", "12:30")]
_NAMES = ["alice", "bob", "carol", "dave"]
_TEXTS = ["see you soon", "dinner at eight", "running late", "call me back"]


def search_bank() -> list[Task]:
    tasks = [make_search_task(s, c) for s in _SUBJECTS for c in _CITIES]
    tasks += [make_search_task(s) for s in _SHORT_SUBJECTS]
    return tasks


def other_banks() -> dict[str, list[Task]]:
    opens = [
        make_open_task("open.clock.alarms", "open the alarm list in clock",
                       "icon-clock", "alarm-tab", "clock", "alarm-list"),
        make_open_task("open.clock.timer", "open the timer in clock",
                       "icon-clock", "timer-tab", "clock", "timer"),
        make_open_task("open.settings.wifi", "open the wi-fi settings",
                       "icon-settings", "wifi-item", "settings", "wifi-screen"),
        make_open_task("open.settings.bluetooth", "open the bluetooth settings",
                       "icon-settings", "bt-item", "settings", "bt-screen"),
        make_open_task("open.messages.chat", "open a new chat in messages",
                       "icon-messages", "new-chat", "messenger", "msg-compose"),
    ]
    procedural = [make_alarm_task(d, s) for d, s in _ALARMS]
    procedural += [make_toggle_task("wifi", False), make_toggle_task("bluetooth", True)]
    messaging = [make_message_task(n, t) for n, t in zip(_NAMES, _TEXTS)]
    messaging += [make_message_task("alice", "call me back"),
                  make_message_task("bob", "see you soon")]
    shopping = [make_shopping_task(p) for p in _PRODUCTS]
    return {"app-open": opens, "procedural": procedural,
            "messaging": messaging, "shopping-like": shopping}


# -- suite operations --------------------------------------------------------

def build_suite(config: SuiteConfig) -> list[Task]:
    """Deterministic suite with round(search_fraction * total) search tasks."""
    rng = np.random.default_rng(config.seed)
    n_search = int(round(config.search_fraction * config.total_count))
    n_other = config.total_count - n_search

    pool = search_bank()
    if n_search > len(pool):
        raise ContractViolation(
            f"cannot draw {n_search} search tasks from a bank of {len(pool)}")
    order = rng.permutation(len(pool))
    chosen = [pool[i] for i in order[:n_search]]

    banks = other_banks()
    cycle = [c for c in CATEGORIES if c != "search"]
    cursors = {c: 0 for c in cycle}
    shuffled = {c: [banks[c][i] for i in rng.permutation(len(banks[c]))] for c in cycle}
    for k in range(n_other):
        cat = cycle[k % len(cycle)]
        if cursors[cat] >= len(shuffled[cat]):
            raise ContractViolation(f"category bank {cat!r} exhausted")
        chosen.append(shuffled[cat][cursors[cat]])
        cursors[cat] += 1
    return chosen


def split_suite(suite: Sequence[Task], eval_count: int, shared_count: int,
                seed: int = 0) -> tuple[list[Task], list[Task]]:
    """Split with an exact number of tasks shared between train and eval."""
    if eval_count > len(suite):
        raise ContractViolation("eval_count exceeds suite size")
    if shared_count > eval_count:
        raise ContractViolation("shared_count exceeds eval_count")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(suite))
    eval_tasks = [suite[i] for i in order[:eval_count]]
    rest = [suite[i] for i in order[eval_count:]]
    shared = eval_tasks[:shared_count]
    if shared_count > len(rest) + shared_count:
        raise ContractViolation("shared_count exceeds train size")
    train_tasks = rest + shared
    return train_tasks, eval_tasks


def overlap_ratio(train: Sequence[Task], eval_tasks: Sequence[Task]) -> float:
    """|train ∩ eval| / |eval| by task id."""
    if not eval_tasks:
        raise ContractViolation("overlap_ratio needs a non-empty eval set")
    train_ids = {t.id for t in train}
    eval_ids = {t.id for t in eval_tasks}
    return len(train_ids & eval_ids) / len(eval_ids)


def format_overlap_pct(ratio: float) -> str:
    return f"{ratio * 100:.2f}%"


def save_suite(suite: Sequence[Task], path: str | Path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in suite], indent=2))


def load_suite(path: str | Path) -> list[Task]:
    return [Task.from_dict(d) for d in json.loads(Path(path).read_text())]


def register_suite(env, suite: Sequence[Task]) -> None:
    for task in suite:
        env.register_task(task.id, task.env_spec())
