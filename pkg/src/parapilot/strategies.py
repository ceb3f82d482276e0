"""Decision-tree construction of the per-stage hybrid-parallelism search space.

A stage's device group of size G (a power of two) is factored into an ordered
sequence of power-of-two levels, each level carrying one paradigm out of
{DP, SDP, TP}; no paradigm repeats, and two orderings of the same levels are
distinct strategies because they map onto the bandwidth hierarchy differently
(the leaf-most level lands on the most tightly connected devices).  Every
shape is emitted twice, with and without activation checkpointing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

from .errors import SpecError
from .specs import ClusterSpec, is_power_of_two

DP = "dp"
SDP = "sdp"
TP = "tp"
PARADIGMS = (DP, SDP, TP)

Level = tuple[str, int]


@dataclass(frozen=True)
class ParallelStrategy:
    """One decision-tree path: ordered (paradigm, degree) levels plus the CKPT flag."""

    pp_degree: int
    levels: tuple[Level, ...]
    ckpt: bool

    def degree(self, paradigm: str) -> int:
        d = 1
        for p, deg in self.levels:
            if p == paradigm:
                d *= deg
        return d

    @property
    def dp_degree(self) -> int:
        return self.degree(DP)

    @property
    def sdp_degree(self) -> int:
        return self.degree(SDP)

    @property
    def tp_degree(self) -> int:
        return self.degree(TP)

    @property
    def data_degree(self) -> int:
        """Product of all batch-splitting degrees (DP and SDP)."""
        return self.dp_degree * self.sdp_degree

    @property
    def group_size(self) -> int:
        return math.prod(d for _, d in self.levels)

    def sort_key(self) -> tuple:
        return (
            len(self.levels),
            tuple(p for p, _ in self.levels),
            tuple(d for _, d in self.levels),
            self.ckpt,
        )

    def to_string(self, cluster: ClusterSpec | None = None) -> str:
        """Canonical form, e.g. ``pp4/tp2@island/dp2/ckpt``.

        Tier annotations are attached only when a cluster is given; the parser
        ignores them, so the string round-trips either way.
        """
        parts = [f"pp{self.pp_degree}"]
        for idx, (paradigm, deg) in enumerate(self.levels):
            token = f"{paradigm}{deg}"
            if cluster is not None:
                span = math.prod(d for _, d in self.levels[idx:])
                token += "@island" if span <= cluster.island_size else "@cross"
            parts.append(token)
        if self.ckpt:
            parts.append("ckpt")
        return "/".join(parts)

    def __str__(self) -> str:
        return self.to_string()


def parse_strategy(text: str) -> ParallelStrategy:
    """Parse the canonical string form back into a strategy.

    Degree-1 level tokens (e.g. ``dp1``) are accepted and skipped; ``@tier``
    annotations are ignored.
    """
    tokens = [t for t in text.strip().split("/") if t]
    if not tokens or not tokens[0].startswith("pp"):
        raise SpecError(f"strategy string must start with 'pp<degree>': {text!r}")
    try:
        pp_degree = int(tokens[0][2:])
    except ValueError:
        raise SpecError(f"bad pipeline degree in strategy string: {text!r}") from None
    if not is_power_of_two(pp_degree):
        raise SpecError(f"pipeline degree must be a power of two: {text!r}")

    levels: list[Level] = []
    ckpt = False
    for token in tokens[1:]:
        token = token.split("@", 1)[0]
        if token in ("ckpt", "nockpt"):
            ckpt = token == "ckpt"
            continue
        for paradigm in PARADIGMS:
            if token.startswith(paradigm):
                try:
                    deg = int(token[len(paradigm):])
                except ValueError:
                    raise SpecError(f"bad level token {token!r} in {text!r}") from None
                if deg == 1:
                    break
                if not is_power_of_two(deg):
                    raise SpecError(f"level degree must be a power of two: {token!r}")
                if any(p == paradigm for p, _ in levels):
                    raise SpecError(f"paradigm {paradigm!r} repeated in {text!r}")
                levels.append((paradigm, deg))
                break
        else:
            raise SpecError(f"unknown token {token!r} in strategy string {text!r}")
    return ParallelStrategy(pp_degree=pp_degree, levels=tuple(levels), ckpt=ckpt)


@dataclass(frozen=True)
class StrategySet:
    """All candidate strategies for one pipeline-degree context, canonically ordered."""

    group_size: int
    strategies: tuple[ParallelStrategy, ...]

    def __len__(self) -> int:
        return len(self.strategies)

    def __iter__(self):
        return iter(self.strategies)


def _factor_sequences(group_size: int) -> list[tuple[int, ...]]:
    """Ordered compositions of group_size into power-of-two factors >= 2."""
    if group_size == 1:
        return [()]
    sequences: list[tuple[int, ...]] = []

    def extend(remaining: int, prefix: tuple[int, ...]) -> None:
        if remaining == 1:
            sequences.append(prefix)
            return
        if len(prefix) >= len(PARADIGMS):
            return  # no paradigm left to label a further level
        factor = 2
        while factor <= remaining:
            if remaining % factor == 0:
                extend(remaining // factor, prefix + (factor,))
            factor *= 2

    extend(group_size, ())
    return sequences


def build_decision_trees(group_size: int) -> list[tuple[Level, ...]]:
    """All tree shapes for a device group: factor sequences with injective paradigm labels."""
    if not is_power_of_two(group_size):
        raise SpecError(f"group size must be a power of two, got {group_size}")
    shapes: list[tuple[Level, ...]] = []
    for factors in _factor_sequences(group_size):
        if not factors:
            shapes.append(())
            continue
        for assignment in permutations(PARADIGMS, len(factors)):
            shapes.append(tuple(zip(assignment, factors)))
    return shapes


def enumerate_strategies(n_devices: int, pp_degree: int) -> StrategySet:
    """Candidate strategies for a group of N/P devices, each with ckpt off and on."""
    if not is_power_of_two(n_devices):
        raise SpecError(f"device count must be a power of two, got {n_devices}")
    if not is_power_of_two(pp_degree):
        raise SpecError(f"pipeline degree must be a power of two, got {pp_degree}")
    if pp_degree > n_devices or n_devices % pp_degree != 0:
        raise SpecError(f"pipeline degree {pp_degree} does not divide device count {n_devices}")
    group_size = n_devices // pp_degree
    strategies = [
        ParallelStrategy(pp_degree=pp_degree, levels=shape, ckpt=ckpt)
        for shape in build_decision_trees(group_size)
        for ckpt in (False, True)
    ]
    strategies.sort(key=ParallelStrategy.sort_key)
    return StrategySet(group_size=group_size, strategies=tuple(strategies))


def prune_dp_sdp(strategy_set: StrategySet) -> StrategySet:
    """Drop strategies mixing DP and SDP: pure SDP always communicates less."""
    survivors = tuple(
        s for s in strategy_set.strategies
        if not (s.degree(DP) > 1 and s.degree(SDP) > 1)
    )
    return StrategySet(group_size=strategy_set.group_size, strategies=survivors)


def candidate_pp_degrees(n_devices: int) -> list[int]:
    """Power-of-two pipeline degrees 1..N."""
    degrees = []
    p = 1
    while p <= n_devices:
        degrees.append(p)
        p *= 2
    return degrees


def count_strategies(n_devices: int, prune: bool = True) -> dict[int, int]:
    """Candidate-strategy count per pipeline degree (the CLI summary)."""
    counts = {}
    for p in candidate_pp_degrees(n_devices):
        sset = enumerate_strategies(n_devices, p)
        if prune:
            sset = prune_dp_sdp(sset)
        counts[p] = len(sset)
    return counts
