"""Vocabulary, role grammars, and token-sequence (de)coding.

Two grammars constrain generation: the subgoal schema
(<reasoning> ... </reasoning><instruction>Instruction: ...</instruction>)
for the planner, and a function-call action grammar (click/type/swipe/key/
system_button/terminate with fixed-point coordinate digits) for the executor.
Both are small deterministic state machines exposing per-state legality masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from hgrpo.env.types import ActionType, AtomicAction
from hgrpo.errors import ActionParseError, ContractViolation

R_OPEN = "<reasoning>"
R_CLOSE = "</reasoning>"
I_OPEN = "<instruction>"
I_CLOSE = "</instruction>"
I_PREFIX = "Instruction:"
EOS = "<eos>"

STRUCTURAL = (R_OPEN, R_CLOSE, I_OPEN, I_CLOSE, I_PREFIX, EOS)
ACTION_NAMES = ("click", "type", "swipe", "key", "system_button", "terminate")
DIGITS = tuple(str(d) for d in range(10))
COMMA = ","
BUTTONS = ("back", "home", "enter")
STATUSES = ("success", "failure")

BUTTON_TO_ACTION = {
    "back": ActionType.PRESS_BACK,
    "home": ActionType.PRESS_HOME,
    "enter": ActionType.PRESS_ENTER,
}

# Extra words every build needs regardless of the task suite: oracle subgoal
# and reasoning templates plus the action-interface payload words.
TEMPLATE_WORDS = ("press", "the", "task", "next", "step", "is", "to")


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    complete: bool = True  # ended with <eos> rather than hitting the length cap

    def __len__(self) -> int:
        return len(self.tokens)


class Vocabulary:
    """Dense-indexed token set with the reserved structure and action tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: tuple[str, ...] = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractViolation("duplicate tokens in vocabulary")
        required = set(STRUCTURAL) | set(ACTION_NAMES) | set(DIGITS) | {COMMA}
        missing = required - set(self.tokens)
        if missing:
            raise ContractViolation(f"vocabulary missing reserved tokens {sorted(missing)}")
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"tokens": list(self.tokens)}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text())["tokens"])


def harvest_words(texts: Iterable[str]) -> list[str]:
    words = []
    for text in texts:
        words.extend(text.lower().split())
    return words


def build_vocabulary(instructions: Iterable[str], labels: Iterable[str]) -> Vocabulary:
    """Assemble the run vocabulary from instructions and element labels."""
    words = sorted(set(
        harvest_words(instructions) + harvest_words(labels) + list(TEMPLATE_WORDS)
        + list(BUTTONS) + list(STATUSES)))
    fixed = list(STRUCTURAL) + list(ACTION_NAMES) + list(DIGITS) + [COMMA]
    tail = [w for w in words if w not in set(fixed)]
    return Vocabulary(fixed + tail)


# -- grammars ----------------------------------------------------------------

class Grammar:
    """Deterministic token-legality automaton for one policy role.

    States are hashable keys; ``mask`` returns a cached boolean legality array
    over the vocabulary, ``advance`` consumes one legal token.
    """

    role = "base"

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._mask_cache: dict[Any, np.ndarray] = {}
        self._legal_cache: dict[Any, np.ndarray] = {}
        self.eos = vocab.index[EOS]
        # Body words: everything that is not a structural tag.
        structural_ids = {vocab.index[t] for t in STRUCTURAL}
        self.word_ids = np.array(
            [i for i in range(vocab.size) if i not in structural_ids], dtype=np.int64)

    def initial_state(self) -> Any:
        raise NotImplementedError

    def is_done(self, state: Any) -> bool:
        return state == "done"

    def mask(self, state: Any) -> np.ndarray:
        m = self._mask_cache.get(state)
        if m is None:
            m = np.zeros(self.vocab.size, dtype=bool)
            self._fill_mask(state, m)
            if not m.any():
                raise ContractViolation(f"grammar state {state!r} has no legal token")
            m.setflags(write=False)
            self._mask_cache[state] = m
        return m

    def legal_ids(self, state: Any) -> np.ndarray:
        ids = self._legal_cache.get(state)
        if ids is None:
            ids = np.flatnonzero(self.mask(state))
            ids.setflags(write=False)
            self._legal_cache[state] = ids
        return ids

    def _fill_mask(self, state: Any, m: np.ndarray) -> None:
        raise NotImplementedError

    def advance(self, state: Any, token: int) -> Any:
        if not self.mask(state)[token]:
            raise ContractViolation(
                f"token {self.vocab.tokens[token]!r} illegal in state {state!r}")
        return self._next_state(state, token)

    def _next_state(self, state: Any, token: int) -> Any:
        raise NotImplementedError


class SubgoalGrammar(Grammar):
    """<reasoning> w+ </reasoning> <instruction> Instruction: w+ </instruction> <eos>"""

    role = "high"

    def initial_state(self) -> str:
        return "r_open"

    def _fill_mask(self, state: str, m: np.ndarray) -> None:
        v = self.vocab.index
        if state == "r_open":
            m[v[R_OPEN]] = True
        elif state == "r_body0":
            m[self.word_ids] = True
        elif state == "r_body":
            m[self.word_ids] = True
            m[v[R_CLOSE]] = True
        elif state == "i_open":
            m[v[I_OPEN]] = True
        elif state == "i_prefix":
            m[v[I_PREFIX]] = True
        elif state == "i_body0":
            m[self.word_ids] = True
        elif state == "i_body":
            m[self.word_ids] = True
            m[v[I_CLOSE]] = True
        elif state == "eos":
            m[self.eos] = True
        else:
            raise ContractViolation(f"unknown state {state!r}")

    def _next_state(self, state: str, token: int) -> str:
        v = self.vocab.index
        if state == "r_open":
            return "r_body0"
        if state in ("r_body0", "r_body"):
            return "i_open" if token == v[R_CLOSE] else "r_body"
        if state == "i_open":
            return "i_prefix"
        if state == "i_prefix":
            return "i_body0"
        if state in ("i_body0", "i_body"):
            return "eos" if token == v[I_CLOSE] else "i_body"
        if state == "eos":
            return "done"
        raise ContractViolation(f"cannot advance from {state!r}")


class ActionGrammar(Grammar):
    """One function call per sequence; coordinates are 4 fixed-point digits."""

    role = "low"

    def __init__(self, vocab: Vocabulary):
        super().__init__(vocab)
        self.digit_ids = np.array(vocab.ids(DIGITS), dtype=np.int64)
        self.comma = vocab.index[COMMA]
        self.button_ids = np.array(vocab.ids(BUTTONS), dtype=np.int64)
        self.status_ids = np.array(vocab.ids(STATUSES), dtype=np.int64)
        self.name_ids = {name: vocab.index[name] for name in ACTION_NAMES}

    def initial_state(self) -> tuple:
        return ("start",)

    def _fill_mask(self, state: tuple, m: np.ndarray) -> None:
        kind = state[0]
        if kind == "start":
            for idx in self.name_ids.values():
                m[idx] = True
        elif kind == "coords":
            consumed, total = state[1], state[2]
            if consumed == total:
                m[self.eos] = True
            elif consumed % 5 == 4:  # every 5th slot is the separator
                m[self.comma] = True
            else:
                m[self.digit_ids] = True
        elif kind == "words0":
            m[self.word_ids] = True
        elif kind == "words":
            m[self.word_ids] = True
            m[self.eos] = True
        elif kind == "button":
            m[self.button_ids] = True
        elif kind == "status":
            m[self.status_ids] = True
        elif kind == "eos":
            m[self.eos] = True
        else:
            raise ContractViolation(f"unknown state {state!r}")

    def _next_state(self, state: tuple, token: int) -> Any:
        kind = state[0]
        if kind == "start":
            name = self.vocab.tokens[token]
            if name == "click":
                return ("coords", 0, 9)   # dddd , dddd
            if name == "swipe":
                return ("coords", 0, 19)  # dddd , dddd , dddd , dddd
            if name == "type":
                return ("words0",)
            if name in ("key", "system_button"):
                return ("button",)
            return ("status",)
        if kind == "coords":
            consumed, total = state[1], state[2]
            if consumed == total:
                return "done"
            return ("coords", consumed + 1, total)
        if kind in ("words0", "words"):
            return "done" if token == self.eos else ("words",)
        if kind in ("button", "status"):
            return ("eos",)
        if kind == "eos":
            return "done"
        raise ContractViolation(f"cannot advance from {state!r}")


def make_grammar(vocab: Vocabulary, role: str) -> Grammar:
    if role == "high":
        return SubgoalGrammar(vocab)
    if role == "low":
        return ActionGrammar(vocab)
    raise ContractViolation(f"unknown grammar role {role!r}")


# -- decoding ----------------------------------------------------------------

_TAGS = {R_OPEN, R_CLOSE, I_OPEN, I_CLOSE}


def decode_subgoal(seq: TokenSequence, vocab: Vocabulary) -> str:
    """Detokenize without validation; format legality is the reward's job."""
    parts: list[str] = []
    prev_tag = True
    for idx in seq.tokens:
        tok = vocab.tokens[idx]
        if tok == EOS:
            continue
        if tok in _TAGS:
            parts.append(tok)
            prev_tag = True
        else:
            parts.append(tok if prev_tag else " " + tok)
            prev_tag = False
    return "".join(parts)


def _coords_from_digits(tokens: list[str]) -> float:
    return int("".join(tokens)) / 10000.0


def decode_action(seq: TokenSequence, vocab: Vocabulary) -> AtomicAction:
    """Parse an action-grammar sequence into an AtomicAction."""
    if not seq.complete:
        raise ActionParseError("sequence truncated before grammar completion")
    toks = [vocab.tokens[i] for i in seq.tokens]
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    if not toks:
        raise ActionParseError("empty sequence")
    name, args = toks[0], toks[1:]

    if name in ("click", "swipe"):
        digits = [t for t in args if t in DIGITS]
        want = 8 if name == "click" else 16
        if len(digits) != want or any(t not in DIGITS and t != COMMA for t in args):
            raise ActionParseError(f"{name} expects {want} coordinate digits")
        vals = [_coords_from_digits(digits[i:i + 4]) for i in range(0, want, 4)]
        if name == "click":
            return AtomicAction.tap((vals[0], vals[1]))
        return AtomicAction.swipe((vals[0], vals[1]), (vals[2], vals[3]))
    if name == "type":
        if not args:
            raise ActionParseError("type expects text words")
        return AtomicAction.type_text(" ".join(args))
    if name in ("key", "system_button"):
        if len(args) != 1 or args[0] not in BUTTON_TO_ACTION:
            raise ActionParseError(f"{name} expects one of {BUTTONS}")
        return AtomicAction(BUTTON_TO_ACTION[args[0]])
    if name == "terminate":
        if len(args) != 1 or args[0] not in STATUSES:
            raise ActionParseError(f"terminate expects one of {STATUSES}")
        return AtomicAction(ActionType.STATUS_COMPLETE)
    raise ActionParseError(f"unknown action name {name!r}")


def encode_action(action: AtomicAction, vocab: Vocabulary) -> TokenSequence:
    """Inverse of decode_action, used by tests and the oracle tooling."""
    def coord_tokens(p: tuple[float, float]) -> list[str]:
        out = []
        for v in p:
            out.extend(f"{round(v * 10000):04d}"[:4])
        return out

    at = action.action_type
    if at == ActionType.DUAL_POINT:
        if action.is_tap():
            x = coord_tokens(action.touch_point)
            toks = ["click"] + x[:4] + [COMMA] + x[4:]
        else:
            t, l = coord_tokens(action.touch_point), coord_tokens(action.lift_point)
            toks = ["swipe"] + t[:4] + [COMMA] + t[4:] + [COMMA] + l[:4] + [COMMA] + l[4:]
    elif at == ActionType.TYPE:
        toks = ["type"] + action.typed_text.lower().split()
    elif at == ActionType.STATUS_COMPLETE:
        toks = ["terminate", "success"]
    else:
        button = {v: k for k, v in BUTTON_TO_ACTION.items()}[at]
        toks = ["key", button]
    toks.append(EOS)
    return TokenSequence(tuple(vocab.index[t] for t in toks), complete=True)


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.index[w] for w in text.lower().split()]
