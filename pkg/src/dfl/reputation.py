"""Local, never-shared reputation records and the pluggable update policies."""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping, Protocol, Sequence

PENALTY = 0.05
DEFAULT_REPUTATION = 1.0

Observation = tuple[bytes, float]


class ReputationTable(Mapping[bytes, float]):
    """Immutable address -> reputation map; unknown addresses read as 1.0."""

    def __init__(self, entries: Mapping[bytes, float] | None = None) -> None:
        self._entries = {k: min(1.0, max(0.0, float(v))) for k, v in (entries or {}).items()}

    def __getitem__(self, address: bytes) -> float:
        return self._entries.get(address, DEFAULT_REPUTATION)

    def __contains__(self, address: object) -> bool:
        return address in self._entries

    def __iter__(self) -> Iterator[bytes]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def with_value(self, address: bytes, value: float) -> "ReputationTable":
        entries = dict(self._entries)
        entries[address] = value
        return ReputationTable(entries)

    def known(self, addresses: Iterable[bytes]) -> "ReputationTable":
        """Table with every address present, new ones at the default."""
        entries = dict(self._entries)
        for a in addresses:
            entries.setdefault(a, DEFAULT_REPUTATION)
        return ReputationTable(entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k.hex()[:8]}: {v:.2f}" for k, v in sorted(self._entries.items()))
        return f"ReputationTable({{{inner}}})"


def update_reputation_0_05(table: ReputationTable, observations: Sequence[Observation]) -> ReputationTable:
    """Penalise the sender of the lowest-accuracy observation by 0.05, floored at 0.

    Ties on accuracy go to the lexicographically smallest address.
    """
    table = table.known(a for a, _ in observations)
    if not observations:
        return table
    address, _ = min(observations, key=lambda obs: (obs[1], obs[0]))
    # rounding keeps repeated 0.05 steps landing exactly on 0.0
    return table.with_value(address, max(0.0, round(table[address] - PENALTY, 10)))


def reputations_all_zero(table: Mapping[bytes, float], generators: Iterable[bytes]) -> bool:
    return all(table[g] == 0.0 for g in generators)


class ReputationPolicy(Protocol):
    name: str
    weighted: bool

    def update(self, table: ReputationTable, observations: Sequence[Observation]) -> ReputationTable: ...


class NoReputation:
    """Plain HalfFedAvg: reputation is never consulted or changed."""

    name = "half_fedavg"
    weighted = False

    def update(self, table: ReputationTable, observations: Sequence[Observation]) -> ReputationTable:
        return table


class Reputation005:
    name = "reputation_0.05"
    weighted = True

    def update(self, table: ReputationTable, observations: Sequence[Observation]) -> ReputationTable:
        return update_reputation_0_05(table, observations)


_POLICIES: dict[str, type] = {NoReputation.name: NoReputation, Reputation005.name: Reputation005}


def register_policy(cls: type) -> type:
    """Make a policy class selectable by its `name` in run configurations."""
    _POLICIES[cls.name] = cls
    return cls


def get_policy(name: str) -> ReputationPolicy:
    try:
        return _POLICIES[name]()
    except KeyError:
        raise ValueError(f"unknown reputation policy {name!r}; known: {sorted(_POLICIES)}") from None
