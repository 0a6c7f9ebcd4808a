"""External environments: a calculator and compare/swap over a hidden array.

Every environment follows the same step signature::

    (observation_tokens, micro_state, latent, exit) = env.step(micro_state, latent, local_id)

``micro_state`` lives only for one invocation (it is reset whenever the agent
routes in); ``latent`` is the task-level hidden state shared between
environments (the hidden value array for sorting, ``None`` for the calculator).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Sequence

DIGITS = tuple("0123456789")
PLUS, MINUS, TIMES, DIVIDE, EQUALS = "+", "−", "×", "÷", "="
OPERATORS = (PLUS, MINUS, TIMES, DIVIDE)
CALC_BUTTONS = DIGITS + OPERATORS + (EQUALS,)
ERR = "ERR"
SLASH = "/"
LABELS = tuple("ABCDE")

# ascii spellings accepted when parsing plain strings
_ALIASES = {"-": MINUS, "*": TIMES, "x": TIMES, "/": DIVIDE}


class ExpressionError(ValueError):
    """Raised when a token sequence cannot be evaluated."""


def tokenize_expression(text: str) -> list[str]:
    """Split ``"12+7×2"`` into single-character tokens, dropping whitespace."""
    return [_ALIASES.get(ch, ch) for ch in text if not ch.isspace()]


def _parse(tokens: Sequence[str]) -> tuple[list[int], list[str]]:
    numbers: list[int] = []
    ops: list[str] = []
    digits = ""
    for tok in tokens:
        tok = _ALIASES.get(tok, tok)
        if tok in DIGITS:
            digits += tok
        elif tok in OPERATORS:
            if not digits:
                raise ExpressionError("operator without left operand")
            numbers.append(int(digits))
            ops.append(tok)
            digits = ""
        else:
            raise ExpressionError(f"unexpected token {tok!r}")
    if not digits:
        raise ExpressionError("empty or trailing-operator expression")
    numbers.append(int(digits))
    return numbers, ops


def literals(tokens: Sequence[str]) -> list[int]:
    """Integer literals of an expression, in order of appearance."""
    return _parse(list(tokens))[0]


def evaluate_expression(tokens: Sequence[str] | str) -> Fraction:
    """Evaluate a parenthesis-free expression exactly.

    ``×`` and ``÷`` bind tighter than ``+`` and ``−``; all operators are
    left-associative.

    >>> evaluate_expression("8÷4÷2")
    Fraction(1, 1)
    """
    if isinstance(tokens, str):
        tokens = tokenize_expression(tokens)
    numbers, ops = _parse(tokens)
    terms: list[Fraction] = [Fraction(numbers[0])]
    signs: list[int] = [1]
    for op, num in zip(ops, numbers[1:]):
        if op == TIMES:
            terms[-1] *= num
        elif op == DIVIDE:
            if num == 0:
                raise ExpressionError("division by zero")
            terms[-1] /= num
        else:
            terms.append(Fraction(num))
            signs.append(1 if op == PLUS else -1)
    return sum((s * t for s, t in zip(signs, terms)), Fraction(0))


def render_number(q: Fraction | int) -> list[str]:
    """Canonical token rendering: ``−`` sign, digits, and ``p / q`` for fractions."""
    q = Fraction(q)
    out = [MINUS] if q < 0 else []
    q = abs(q)
    out.extend(str(q.numerator))
    if q.denominator != 1:
        out.append(SLASH)
        out.extend(str(q.denominator))
    return out


class Environment:
    """Base class; subclasses define ``name``, ``route_desc`` and ``actions``."""

    name: str
    route_desc: tuple[str, ...]
    actions: tuple[str, ...]

    def action_desc(self, local_id: int) -> tuple[str, ...]:
        return (self.actions[local_id],)

    def reset(self) -> Any:
        raise NotImplementedError

    def step(self, micro: Any, latent: Any, local_id: int):
        raise NotImplementedError


@dataclass(frozen=True)
class CalcState:
    buffer: tuple[str, ...] = ()


def calculator_step(state: CalcState, button: str) -> tuple[list[str], CalcState, bool]:
    if button not in CALC_BUTTONS:
        raise ValueError(f"unknown calculator button {button!r}")
    if button != EQUALS:
        return [button], CalcState(state.buffer + (button,)), False
    try:
        obs = [EQUALS] + render_number(evaluate_expression(state.buffer))
    except ExpressionError:
        obs = [EQUALS, ERR]
    return obs, CalcState(), True


class Calculator(Environment):
    """Stateless across invocations; the button buffer lives for one invocation."""

    name = "calculator"

    def __init__(self, buttons: Sequence[str] = CALC_BUTTONS, route_desc: Sequence[str] = ("calculate",)):
        self.actions = tuple(buttons)
        self.route_desc = tuple(route_desc)

    def reset(self) -> CalcState:
        return CalcState()

    def step(self, micro: CalcState, latent: Any, local_id: int):
        obs, micro, exit_ = calculator_step(micro, self.actions[local_id])
        return obs, micro, latent, exit_


@dataclass(frozen=True)
class HiddenArray:
    """Values behind position labels; the policy only sees the labels."""

    values: tuple[int, ...]
    direction: str = "asc"
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", LABELS[: len(self.values)])
        if len(set(self.values)) != len(self.values):
            raise ValueError("hidden values must be pairwise distinct")
        if self.direction not in ("asc", "desc"):
            raise ValueError(f"bad direction {self.direction!r}")

    @property
    def n(self) -> int:
        return len(self.values)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def is_sorted(self) -> bool:
        pairs = zip(self.values, self.values[1:])
        if self.direction == "asc":
            return all(a < b for a, b in pairs)
        return all(a > b for a, b in pairs)

    def ranks(self) -> tuple[int, ...]:
        """Rank of the value at each position (0 = smallest)."""
        order = sorted(range(self.n), key=self.values.__getitem__)
        ranks = [0] * self.n
        for r, i in enumerate(order):
            ranks[i] = r
        return tuple(ranks)

    def swapped(self, i: int, j: int) -> "HiddenArray":
        vals = list(self.values)
        vals[i], vals[j] = vals[j], vals[i]
        return replace(self, values=tuple(vals))


@dataclass(frozen=True)
class SelectorState:
    first_pick: str | None = None


def _second_pick(state: SelectorState, z: HiddenArray, label: str):
    """Shared two-pick protocol; returns (first label or None, error flag)."""
    if label not in z.labels:
        return None, True
    if state.first_pick is None:
        return None, False
    return state.first_pick, state.first_pick == label


def compare_step(state: SelectorState, z: HiddenArray, label: str):
    first, bad = _second_pick(state, z, label)
    if bad:
        return [ERR], SelectorState(), z, True
    if first is None:
        return [label], SelectorState(label), z, False
    rel = "<" if z.values[z.index(first)] < z.values[z.index(label)] else ">"
    return [first, rel, label], SelectorState(), z, True


def swap_step(state: SelectorState, z: HiddenArray, label: str):
    first, bad = _second_pick(state, z, label)
    if bad:
        return [ERR], SelectorState(), z, True
    if first is None:
        return [label], SelectorState(label), z, False
    z = z.swapped(z.index(first), z.index(label))
    return ["swapped", first, label], SelectorState(), z, True


class _Selector(Environment):
    _step = None

    def __init__(self, labels: Sequence[str] = LABELS, route_desc: Sequence[str] | None = None):
        self.actions = tuple(labels)
        self.route_desc = tuple(route_desc) if route_desc else (self.name,)

    def reset(self) -> SelectorState:
        return SelectorState()

    def step(self, micro: SelectorState, latent: HiddenArray, local_id: int):
        return type(self)._step(micro, latent, self.actions[local_id])


class Compare(_Selector):
    name = "compare"
    _step = staticmethod(compare_step)


class Swap(_Selector):
    name = "swap"
    _step = staticmethod(swap_step)
