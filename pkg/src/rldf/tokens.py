"""Toy vocabulary shared by tasks, the denoiser and the decoders."""

from __future__ import annotations

DIGITS = tuple(range(10))
PLUS = 10
EQUALS = 11  # answer delimiter
SEP = 12
EOS = 13
PAD = 14
MASK = 15
VOCAB_SIZE = 16

_SYMBOLS = {PLUS: "+", EQUALS: "=", SEP: "|", EOS: "$", PAD: "_", MASK: "?"}
_FROM_CHAR = {v: k for k, v in _SYMBOLS.items()}


def encode(text: str) -> list[int]:
    out = []
    for ch in text:
        if ch.isdigit():
            out.append(int(ch))
        elif ch in _FROM_CHAR:
            out.append(_FROM_CHAR[ch])
        else:
            raise ValueError(f"no token for character {ch!r}")
    return out


def decode(ids) -> str:
    return "".join(str(i) if 0 <= i <= 9 else _SYMBOLS.get(int(i), "#") for i in ids)
