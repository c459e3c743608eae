"""R@n, IoU=m recall tables."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .data import DataError
from .localizer import Moment, iou


@dataclass
class RecallTable:
    entries: dict[tuple[int, float], float]
    queries: int

    @property
    def n_list(self) -> list[int]:
        return sorted({n for n, _ in self.entries})

    @property
    def m_list(self) -> list[float]:
        return sorted({m for _, m in self.entries})

    def __getitem__(self, key: tuple[int, float]) -> float:
        return self.entries[key]

    def check_monotone(self) -> None:
        """Raise AssertionError unless recall grows with n and shrinks with m."""
        ns, ms = self.n_list, self.m_list
        for m in ms:
            for a, b in zip(ns, ns[1:]):
                assert self.entries[(a, m)] <= self.entries[(b, m)], f"R@{a} > R@{b} at IoU={m}"
        for n in ns:
            for a, b in zip(ms, ms[1:]):
                assert self.entries[(n, a)] >= self.entries[(n, b)], f"R@{n}: IoU={a} < IoU={b}"

    def to_text(self) -> str:
        ms = self.m_list
        header = "       " + "".join(f"  IoU={m:<5g}" for m in ms)
        lines = [header]
        for n in self.n_list:
            lines.append(f"R@{n:<4d} " + "".join(f"  {self.entries[(n, m)]:>9.2f}" for m in ms))
        lines.append(f"queries: {self.queries}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "queries": self.queries,
            "recall": [{"n": n, "m": m, "value": v} for (n, m), v in sorted(self.entries.items())],
        }, sort_keys=True)


def recall_at(predictions: Mapping[str, Sequence[Moment]], ground_truths: Mapping[str, tuple[float, float]],
              n_list: Sequence[int], m_list: Sequence[float], strict: bool = True) -> RecallTable:
    """Percentage of queries whose top-n moments include one with IoU above m.

    ``predictions`` must already be sorted by confidence.  Queries without a
    prediction entry count as misses.  ``strict=False`` uses IoU >= m.
    """
    unknown = [sid for sid in predictions if sid not in ground_truths]
    if unknown:
        raise DataError(f"no ground truth for sample ids {unknown[:5]}")
    ids = list(ground_truths)
    best = {}  # (sid, n) -> best IoU among top-n
    for sid in ids:
        gt = ground_truths[sid]
        ious = [iou((m.start, m.end), gt) for m in predictions.get(sid, [])]
        for n in n_list:
            best[(sid, n)] = max(ious[:n], default=-1.0)
    entries = {}
    for n in n_list:
        for m in m_list:
            if strict:
                hits = sum(best[(sid, n)] > m for sid in ids)
            else:
                hits = sum(best[(sid, n)] >= m for sid in ids)
            entries[(n, m)] = 100.0 * hits / len(ids) if ids else 0.0
    table = RecallTable(entries, len(ids))
    table.check_monotone()
    return table
