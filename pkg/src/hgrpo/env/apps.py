"""Declarative app library for the simulated device.

Apps are pure data: screens hold elements (normalized boxes), tap/enter
transitions are lists of small effect ops, and labels may interpolate
app-state values with ``{dotted.path}`` placeholders. The default library
ships four scripted apps (browser, messenger, clock, settings) plus the
launcher with two icon layouts.

All element centers sit on a 0.1 lattice so oracle tap coordinates have
low-entropy digit patterns.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any

from hgrpo.errors import ContractViolation

_TIME_RE = re.compile(r"^\s*(\d{1,2}):(\d{2})\s*(am|pm)?\s*$", re.IGNORECASE)


def cell(cx: float, cy: float, w: float = 0.1, h: float = 0.1) -> list[float]:
    """Box of size w x h centered at (cx, cy)."""
    return [round(cx - w / 2, 4), round(cy - h / 2, 4),
            round(cx + w / 2, 4), round(cy + h / 2, 4)]


def parse_clock_time(text: str) -> str | None:
    """'4:00 pm' / '16:00' -> 'HH:MM', or None if unparseable."""
    m = _TIME_RE.match(text)
    if not m:
        return None
    hour, minute, ampm = int(m.group(1)), int(m.group(2)), m.group(3)
    if minute > 59:
        return None
    if ampm:
        if not 1 <= hour <= 12:
            return None
        hour = hour % 12 + (12 if ampm.lower() == "pm" else 0)
    elif hour > 23:
        return None
    return f"{hour:02d}:{minute:02d}"


def default_library() -> dict[str, Any]:
    """The built-in app library (see module docstring)."""
    launcher = {
        "display": "Home",
        "screens": {
            "home": {
                "elements": [
                    {"id": "home-header", "kind": "static-text", "label": "Home screen",
                     "box": cell(0.5, 0.1, 0.4)},
                    {"id": "icon-chrome", "kind": "icon", "label": "Chrome",
                     "box": cell(0.2, 0.3), "on_tap": [{"op": "open_app", "app": "chrome"}]},
                    {"id": "icon-messages", "kind": "icon", "label": "Messages",
                     "box": cell(0.5, 0.3), "on_tap": [{"op": "open_app", "app": "messenger"}]},
                    {"id": "icon-clock", "kind": "icon", "label": "Clock",
                     "box": cell(0.8, 0.3), "on_tap": [{"op": "open_app", "app": "clock"}]},
                    {"id": "icon-settings", "kind": "icon", "label": "Settings",
                     "box": cell(0.2, 0.5), "on_tap": [{"op": "open_app", "app": "settings"}]},
                ],
            },
            "all-apps": {
                "elements": [
                    {"id": "apps-header", "kind": "static-text", "label": "All apps",
                     "box": cell(0.5, 0.1, 0.4)},
                    {"id": "icon-camera", "kind": "icon", "label": "Camera",
                     "box": cell(0.2, 0.3)},
                    {"id": "icon-files", "kind": "icon", "label": "Files",
                     "box": cell(0.5, 0.3), "on_tap": []},
                    {"id": "icon-clock", "kind": "icon", "label": "Clock",
                     "box": cell(0.5, 0.5), "on_tap": [{"op": "open_app", "app": "clock"}]},
                    {"id": "icon-settings", "kind": "icon", "label": "Settings",
                     "box": cell(0.8, 0.5), "on_tap": [{"op": "open_app", "app": "settings"}]},
                    {"id": "icon-messages", "kind": "icon", "label": "Messages",
                     "box": cell(0.2, 0.7), "on_tap": [{"op": "open_app", "app": "messenger"}]},
                    {"id": "icon-chrome", "kind": "icon", "label": "Chrome",
                     "box": cell(0.8, 0.7), "on_tap": [{"op": "open_app", "app": "chrome"}]},
                ],
            },
        },
    }

    chrome = {
        "display": "Chrome",
        "entry": "chrome-home",
        "screens": {
            "chrome-home": {
                "elements": [
                    {"id": "search-bar", "kind": "text-field", "label": "Search bar",
                     "box": cell(0.5, 0.1, 0.6),
                     "on_tap": [{"op": "focus", "field": "search-bar"}]},
                    {"id": "bookmarks", "kind": "static-text", "label": "Bookmarks",
                     "box": cell(0.5, 0.3, 0.4)},
                ],
                "on_enter_key": [
                    {"op": "set_from_buffer", "path": "chrome.query", "field": "search-bar"},
                    {"op": "blur"},
                    {"op": "goto", "screen": "chrome-results"},
                ],
            },
            "chrome-results": {
                "elements": [
                    {"id": "results-header", "kind": "static-text",
                     "label": "Results for {chrome.query}", "box": cell(0.5, 0.1, 0.8)},
                    {"id": "result-1", "kind": "list-item", "label": "Top result",
                     "box": cell(0.5, 0.3, 0.8)},
                    {"id": "back-nav", "kind": "button", "label": "Back",
                     "box": cell(0.2, 0.9), "on_tap": [{"op": "back"}]},
                ],
            },
        },
    }

    messenger = {
        "display": "Messages",
        "entry": "msg-home",
        "screens": {
            "msg-home": {
                "elements": [
                    {"id": "chats-header", "kind": "static-text", "label": "Chats",
                     "box": cell(0.5, 0.1, 0.4)},
                    {"id": "new-chat", "kind": "button", "label": "New chat",
                     "box": cell(0.5, 0.9, 0.2),
                     "on_tap": [{"op": "goto", "screen": "msg-compose"},
                                {"op": "focus", "field": "to-field"}]},
                ],
            },
            "msg-compose": {
                "elements": [
                    {"id": "to-field", "kind": "text-field", "label": "To",
                     "box": cell(0.5, 0.1, 0.6),
                     "on_tap": [{"op": "focus", "field": "to-field"}]},
                    {"id": "msg-field", "kind": "text-field", "label": "Message",
                     "box": cell(0.5, 0.3, 0.6),
                     "on_tap": [{"op": "focus", "field": "msg-field"}]},
                    {"id": "send", "kind": "button", "label": "Send",
                     "box": cell(0.8, 0.5),
                     "on_tap": [
                         {"op": "list_add", "path": "messenger.sent",
                          "value": {"to": {"buffer": "to-field"},
                                    "text": {"buffer": "msg-field"}}},
                         {"op": "blur"},
                         {"op": "goto", "screen": "msg-sent"},
                     ]},
                ],
                "on_enter_key": [{"op": "blur"}],
            },
            "msg-sent": {
                "elements": [
                    {"id": "sent-banner", "kind": "static-text", "label": "Message sent",
                     "box": cell(0.5, 0.3, 0.4)},
                ],
            },
        },
    }

    clock = {
        "display": "Clock",
        "entry": "clock-home",
        "screens": {
            "clock-home": {
                "elements": [
                    {"id": "alarm-tab", "kind": "button", "label": "Alarm",
                     "box": cell(0.2, 0.1),
                     "on_tap": [{"op": "goto", "screen": "alarm-list"}]},
                    {"id": "timer-tab", "kind": "button", "label": "Timer",
                     "box": cell(0.5, 0.1),
                     "on_tap": [{"op": "goto", "screen": "timer"}]},
                    {"id": "clock-face", "kind": "static-text", "label": "Clock face",
                     "box": cell(0.5, 0.5, 0.4, 0.2)},
                ],
            },
            "alarm-list": {
                "elements": [
                    {"id": "alarms-header", "kind": "static-text",
                     "label": "Saved alarms {clock.alarms_text}", "box": cell(0.5, 0.1, 0.8)},
                    {"id": "add-alarm", "kind": "button", "label": "Add alarm",
                     "box": cell(0.5, 0.9, 0.2),
                     "on_tap": [{"op": "goto", "screen": "alarm-edit"},
                                {"op": "focus", "field": "time-field"}]},
                ],
            },
            "alarm-edit": {
                "elements": [
                    {"id": "time-field", "kind": "text-field", "label": "Time",
                     "box": cell(0.5, 0.1, 0.6),
                     "on_tap": [{"op": "focus", "field": "time-field"}]},
                    {"id": "save-alarm", "kind": "button", "label": "Save",
                     "box": cell(0.5, 0.9),
                     "on_tap": [
                         {"op": "list_add", "path": "clock.alarms",
                          "value": {"time_from_buffer": "time-field"}},
                         {"op": "set_text", "path": "clock.alarms_text",
                          "value": {"join_list": "clock.alarms"}},
                         {"op": "clear_buffer", "field": "time-field"},
                         {"op": "blur"},
                         {"op": "goto", "screen": "alarm-list"},
                     ]},
                ],
                "on_enter_key": [{"op": "blur"}],
            },
            "timer": {
                "elements": [
                    {"id": "timer-face", "kind": "static-text", "label": "Timer ready",
                     "box": cell(0.5, 0.5, 0.4, 0.2)},
                ],
            },
        },
    }

    settings = {
        "display": "Settings",
        "entry": "settings-home",
        "screens": {
            "settings-home": {
                "elements": [
                    {"id": "wifi-item", "kind": "list-item", "label": "Wi-Fi",
                     "box": cell(0.5, 0.3, 0.8),
                     "on_tap": [{"op": "goto", "screen": "wifi-screen"}]},
                    {"id": "bt-item", "kind": "list-item", "label": "Bluetooth",
                     "box": cell(0.5, 0.5, 0.8),
                     "on_tap": [{"op": "goto", "screen": "bt-screen"}]},
                    {"id": "display-item", "kind": "list-item", "label": "Display",
                     "box": cell(0.5, 0.7, 0.8),
                     "on_tap": [{"op": "goto", "screen": "display-screen"}]},
                ],
            },
            "wifi-screen": {
                "elements": [
                    {"id": "wifi-header", "kind": "static-text", "label": "Wi-Fi settings",
                     "box": cell(0.5, 0.1, 0.6)},
                    {"id": "wifi-toggle", "kind": "button", "label": "Wi-Fi toggle",
                     "box": cell(0.5, 0.3, 0.4),
                     "on_tap": [{"op": "toggle", "path": "settings.wifi"}]},
                ],
            },
            "bt-screen": {
                "elements": [
                    {"id": "bt-header", "kind": "static-text", "label": "Bluetooth settings",
                     "box": cell(0.5, 0.1, 0.6)},
                    {"id": "bt-toggle", "kind": "button", "label": "Bluetooth toggle",
                     "box": cell(0.5, 0.3, 0.4),
                     "on_tap": [{"op": "toggle", "path": "settings.bluetooth"}]},
                ],
            },
            "display-screen": {
                "elements": [
                    {"id": "brightness", "kind": "static-text", "label": "Brightness",
                     "box": cell(0.5, 0.3, 0.4)},
                ],
            },
        },
    }

    return {
        "launcher": launcher,
        "apps": {
            "chrome": chrome,
            "messenger": messenger,
            "clock": clock,
            "settings": settings,
        },
        "initial_state": {
            "chrome": {"query": ""},
            "messenger": {"sent": []},
            "clock": {"alarms": [], "alarms_text": "none"},
            "settings": {"wifi": True, "bluetooth": False},
        },
    }


class AppLibrary:
    """Validated wrapper around a library dict with screen lookup helpers."""

    def __init__(self, data: dict[str, Any] | None = None):
        self.data = data if data is not None else default_library()
        self._validate()

    def _validate(self) -> None:
        for key in ("launcher", "apps", "initial_state"):
            if key not in self.data:
                raise ContractViolation(f"app library missing {key!r} section")
        for app_id, app in self.data["apps"].items():
            if app["entry"] not in app["screens"]:
                raise ContractViolation(f"app {app_id!r} entry screen missing")

    def launcher_screen(self, layout_mode: str) -> dict[str, Any]:
        screens = self.data["launcher"]["screens"]
        if layout_mode not in screens:
            raise ContractViolation(f"unknown layout mode {layout_mode!r}")
        return screens[layout_mode]

    def app(self, app_id: str) -> dict[str, Any]:
        if app_id == "launcher":
            return self.data["launcher"]
        return self.data["apps"][app_id]

    def screen(self, app_id: str, screen_id: str) -> dict[str, Any]:
        if app_id == "launcher":
            return self.data["launcher"]["screens"][screen_id]
        return self.data["apps"][app_id]["screens"][screen_id]

    def initial_state(self) -> dict[str, Any]:
        return json.loads(json.dumps(self.data["initial_state"]))

    def all_labels(self) -> list[str]:
        """Every element label template in the library (placeholders stripped)."""
        labels = []
        groups = [self.data["launcher"]["screens"]] + [
            app["screens"] for app in self.data["apps"].values()
        ]
        for screens in groups:
            for screen in screens.values():
                for el in screen["elements"]:
                    labels.append(re.sub(r"\{[^}]*\}", "", el["label"]).strip())
        return labels

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "AppLibrary":
        return cls(json.loads(Path(path).read_text()))
