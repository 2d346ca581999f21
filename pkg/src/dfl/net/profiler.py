"""Per-task CPU time accounting for a running node."""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

CATEGORIES = (
    "gather_confirmation",
    "blockchain_overhead_block",
    "broadcast_transaction",
    "measure_accuracy",
    "blockchain_overhead_tx",
    "calculate_self_accuracy",
    "blockchain_overhead_update",
    "broadcast_generated_transaction",
    "calculate_accuracy",
    "blockchain_overhead_receive",
)

OVERHEAD = tuple(c for c in CATEGORIES if c.startswith("blockchain_overhead"))

# grouping used when printing the report as a table
GROUPS = {
    "generate_block": ("gather_confirmation", "blockchain_overhead_block"),
    "generate_transaction": ("broadcast_transaction", "measure_accuracy", "blockchain_overhead_tx"),
    "update_model": ("calculate_self_accuracy", "blockchain_overhead_update"),
    "receive_transactions": ("broadcast_generated_transaction", "calculate_accuracy",
                             "blockchain_overhead_receive"),
}


def _clock() -> tuple[str, callable]:
    try:
        time.thread_time()
        return "thread_cpu_time", time.thread_time
    except (AttributeError, OSError):
        return "monotonic_wall_time", time.monotonic


@dataclass
class ProfilerReport:
    times: dict[str, float]
    mode: str
    wall_seconds: float = 0.0

    def __post_init__(self) -> None:
        unknown = set(self.times) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown profiler categories {sorted(unknown)}")
        if any(v < 0 for v in self.times.values()):
            raise ValueError("profiler times must be non-negative")
        for c in CATEGORIES:
            self.times.setdefault(c, 0.0)

    @property
    def total(self) -> float:
        return sum(self.times.values())

    @property
    def blockchain_overhead(self) -> float:
        return sum(self.times[c] for c in OVERHEAD)

    @property
    def blockchain_overhead_fraction(self) -> float:
        total = self.total
        return self.blockchain_overhead / total if total > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "wall_seconds": self.wall_seconds,
            "categories": {c: self.times[c] for c in CATEGORIES},
            "total": self.total,
            "blockchain_overhead": self.blockchain_overhead,
            "blockchain_overhead_fraction": self.blockchain_overhead_fraction,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ProfilerReport":
        return cls(dict(data["categories"]), data["mode"], data.get("wall_seconds", 0.0))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def table(self) -> str:
        lines = []
        for group, cats in GROUPS.items():
            lines.append(group)
            lines.extend(f"  {c:<34}{self.times[c]:>12.4f}" for c in cats)
        lines.append(f"blockchain overhead fraction: {self.blockchain_overhead_fraction:.4%} ({self.mode})")
        return "\n".join(lines)


@dataclass
class Profiler:
    """Cumulative timers; nested sections charge only the innermost category."""

    mode: str = field(init=False)
    _clock: callable = field(init=False, repr=False)
    times: dict[str, float] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0.0))
    _stack: list[list] = field(default_factory=list, repr=False)
    _started: float = field(default_factory=time.monotonic, repr=False)

    def __post_init__(self) -> None:
        self.mode, self._clock = _clock()

    @contextlib.contextmanager
    def section(self, name: str) -> Iterator[None]:
        if name not in self.times:
            raise ValueError(f"unknown profiler category {name!r}")
        now = self._clock()
        if self._stack:
            outer = self._stack[-1]
            self.times[outer[0]] += now - outer[1]
        frame = [name, now]
        self._stack.append(frame)
        try:
            yield
        finally:
            end = self._clock()
            self.times[name] += end - frame[1]
            self._stack.pop()
            if self._stack:
                self._stack[-1][1] = end

    def report(self) -> ProfilerReport:
        return ProfilerReport(dict(self.times), self.mode, time.monotonic() - self._started)
