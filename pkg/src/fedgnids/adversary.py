"""Replay-and-scale model poisoning by a compromised client."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import Snapshot
from .model import ModelParams


@dataclass(frozen=True)
class AttackConfig:
    malicious_clients: frozenset[int] = field(default_factory=frozenset)
    p: float = 1.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "malicious_clients", frozenset(int(k) for k in self.malicious_clients))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")

    def validate(self, K: int) -> None:
        bad = [k for k in self.malicious_clients if not 1 <= k <= K]
        if bad:
            raise ValueError(f"malicious clients {bad} outside [1, {K}]")


def poison_client_data(
    snapshots: Sequence[Snapshot],
    em: Iterable[tuple[int, int]],
    p: float,
    seed: int = 0,
) -> tuple[list[Snapshot], float]:
    """Inject the attacker's future edges into its own training snapshots.

    One uniform draw per snapshot; when it falls below ``p`` every edge of
    ``em`` whose endpoints both occur in that snapshot, and which is not
    already there, is added with weight 1.  Returns the poisoned snapshots
    and the number of injected edges per malicious edge.
    """
    em = list(dict.fromkeys(em))
    rng = np.random.default_rng(seed)
    draws = rng.random(len(snapshots))
    injected = 0
    out = []
    for snap, u in zip(snapshots, draws):
        if u < p and em:
            extra = [e for e in em if e not in snap.edges and e[0] in snap.nodes and e[1] in snap.nodes]
            if extra:
                snap = snap.with_edges(extra)
                injected += len(extra)
        out.append(snap)
    epm = injected / len(em) if em else 0.0
    return out, epm


def scale_update(w: ModelParams, gamma: float) -> ModelParams:
    """Scale the submitted parameter vector (not the delta) by ``gamma``."""
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return w.replace(w.flat * gamma)
