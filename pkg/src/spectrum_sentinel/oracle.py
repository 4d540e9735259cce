"""Simulated annotator: answers same-cluster and anomalous-or-not queries from
ground truth, flipping each answer with probability p_incorrect.

Flips are decided by hashing (seed, query key) rather than drawing from a
shared RNG stream, so the answer to a given query never depends on how many
other queries were asked before it. Replays are therefore exact under any
interleaving.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Mapping

from .errors import InvalidArgument

NORMAL_KIND = "normal"


@dataclass(frozen=True)
class OracleConfig:
    p_incorrect: float
    seed: int
    kinds: Mapping[str, str]          # instance id -> anomaly kind name or NORMAL_KIND
    anomalous_kinds: frozenset[str] = frozenset()

    def __post_init__(self):
        if not 0.0 <= self.p_incorrect <= 1.0:
            raise InvalidArgument("p_incorrect must lie in [0, 1]")


def make_oracle(kinds: Mapping[str, str], p_incorrect: float = 0.0, seed: int = 0,
                anomalous_kinds: frozenset[str] | None = None) -> OracleConfig:
    if anomalous_kinds is None:
        anomalous_kinds = frozenset(set(kinds.values()) - {NORMAL_KIND})
    return OracleConfig(p_incorrect=p_incorrect, seed=seed, kinds=dict(kinds),
                        anomalous_kinds=anomalous_kinds)


def _unit_hash(seed: int, *parts: str) -> float:
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", seed))
    for p in parts:
        h.update(b"\x1f")
        h.update(p.encode("utf-8"))
    return struct.unpack("<Q", h.digest())[0] / 2.0 ** 64


def _flip(cfg: OracleConfig, truth: bool, *key: str) -> bool:
    if _unit_hash(cfg.seed, *key) < cfg.p_incorrect:
        return not truth
    return truth


def answer_pair(cfg: OracleConfig, id_a: str, id_b: str) -> bool:
    """Do the two instances carry the same anomaly kind? Possibly flipped."""
    for i in (id_a, id_b):
        if i not in cfg.kinds:
            raise InvalidArgument(f"unknown instance id {i!r}")
    truth = cfg.kinds[id_a] == cfg.kinds[id_b]
    a, b = sorted((id_a, id_b))
    return _flip(cfg, truth, "pair", a, b)


def answer_label(cfg: OracleConfig, instance_id: str) -> bool:
    """Is the instance anomalous under the harness's kind designation? Possibly flipped."""
    if instance_id not in cfg.kinds:
        raise InvalidArgument(f"unknown instance id {instance_id!r}")
    truth = cfg.kinds[instance_id] in cfg.anomalous_kinds
    return _flip(cfg, truth, "label", instance_id)
