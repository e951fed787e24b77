"""Operation-level FLOP accounting.

Ops report work into the active counter by category.  ``conv`` holds
multiply-accumulates of (transposed) convolutions, ``bias`` their bias adds;
everything else is one unit per elementwise operation.
"""
from __future__ import annotations

import contextlib
from collections import Counter

_ACTIVE: list["FlopCounter"] = []


class FlopCounter(Counter):
    @property
    def total(self) -> int:
        return int(sum(self.values()))

    @property
    def conv_family(self) -> int:
        return int(self["conv"] + self["bias"])


def add(category: str, n: int) -> None:
    if _ACTIVE:
        _ACTIVE[-1][category] += int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _ACTIVE.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE.pop()
