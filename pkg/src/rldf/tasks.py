"""Procedurally generated verifiable tasks and their reward rules.

Families:

``addition``  prompt ``ab+cd``, response restates the problem and answers
              (``ab+cd=S$`` padded to 10 tokens).  Binary reward.
``reverse``   prompt of 6 digits, response the reversed digits then EOS.
              Binary reward.
``sort``      prompt of 8 digits, response the digits in ascending order.
              Pass-rate reward over the 8 output positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tokens

FAMILIES = ("addition", "reverse", "sort")
RESPONSE_LENGTH = {"addition": 10, "reverse": 7, "sort": 8}
PROMPT_LENGTH = {"addition": 5, "reverse": 6, "sort": 8}


def extract_answer(response: Sequence[int]) -> list[int] | None:
    """Tokens after the last answer delimiter, up to EOS/PAD.

    Returns None when the span is empty or holds anything but digits.
    """
    resp = [int(t) for t in response]
    if tokens.EQUALS in resp:
        resp = resp[len(resp) - resp[::-1].index(tokens.EQUALS):]
    span = []
    for t in resp:
        if t in (tokens.EOS, tokens.PAD):
            break
        if not 0 <= t <= 9:
            return None
        span.append(t)
    return span or None


def canonical_number(digits: Sequence[int]) -> int:
    return int("".join(str(d) for d in digits))


def reward_binary(response: Sequence[int], target) -> float:
    """1.0 iff the extracted answer matches ``target``.

    An integer target is compared numerically (so ``046`` matches 46); a
    token sequence target must match exactly.
    """
    ans = extract_answer(response)
    if ans is None:
        return 0.0
    if isinstance(target, (int, np.integer)):
        return float(canonical_number(ans) == int(target))
    return float(tuple(ans) == tuple(int(t) for t in target))


def reward_passrate(response: Sequence[int], checks: Sequence[tuple[int, int]]) -> float:
    """Fraction of ``(output index, expected token)`` checks satisfied."""
    if not checks:
        raise ValueError("at least one check required")
    ans = extract_answer(response) or []
    passed = sum(1 for i, want in checks if i < len(ans) and ans[i] == want)
    return passed / len(checks)


@dataclass(frozen=True)
class TaskInstance:
    prompt: tuple[int, ...]
    family: str
    target: object  # int for addition, token tuple otherwise
    solution: tuple[int, ...]

    @property
    def response_length(self) -> int:
        return len(self.solution)

    @property
    def checks(self) -> list[tuple[int, int]]:
        return list(enumerate(self.target))

    def reward(self, response: Sequence[int]) -> float:
        if self.family == "sort":
            return reward_passrate(response, self.checks)
        return reward_binary(response, self.target)


def _pad(seq: list[int], length: int) -> tuple[int, ...]:
    return tuple(seq + [tokens.PAD] * (length - len(seq)))


def make_task(family: str, rng: np.random.Generator) -> TaskInstance:
    if family == "addition":
        a, b = (int(v) for v in rng.integers(0, 100, size=2))
        prompt = tokens.encode(f"{a:02d}+{b:02d}")
        sol = prompt + [tokens.EQUALS] + tokens.encode(str(a + b)) + [tokens.EOS]
        return TaskInstance(tuple(prompt), family, a + b, _pad(sol, RESPONSE_LENGTH[family]))
    if family == "reverse":
        digits = [int(v) for v in rng.integers(0, 10, size=PROMPT_LENGTH[family])]
        rev = digits[::-1]
        return TaskInstance(tuple(digits), family, tuple(rev), tuple(rev + [tokens.EOS]))
    if family == "sort":
        digits = [int(v) for v in rng.integers(0, 10, size=PROMPT_LENGTH[family])]
        srt = sorted(digits)
        return TaskInstance(tuple(digits), family, tuple(srt), tuple(srt))
    raise ValueError(f"unknown task family {family!r}")


def generate_tasks(family: str, count: int, rng: np.random.Generator) -> list[TaskInstance]:
    return [make_task(family, rng) for _ in range(count)]


def dataset_manifest(family: str, count: int, seed: int, split: str) -> dict:
    return {
        "family": family,
        "count": count,
        "seed": seed,
        "split": split,
        "max_len": PROMPT_LENGTH[family] + RESPONSE_LENGTH[family],
    }
