from hgrpo.env.apps import AppLibrary, default_library
from hgrpo.env.device import LAYOUT_MODES, DeviceEnv
from hgrpo.env.types import (
    ActionType,
    AtomicAction,
    DeviceState,
    ScreenState,
    StepResult,
    UiElement,
)

__all__ = [
    "ActionType",
    "AppLibrary",
    "AtomicAction",
    "DeviceEnv",
    "DeviceState",
    "LAYOUT_MODES",
    "ScreenState",
    "StepResult",
    "UiElement",
    "default_library",
]
