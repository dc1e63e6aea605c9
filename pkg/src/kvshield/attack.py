"""Attacker-side replay of a leaked KV cache.

The attacker knows the architecture, the plaintext weights and the victim's
queries, but not the permutation keys. It feeds a leaked cache into its own
attention module and compares the results with the victim's true attention
outputs by cosine similarity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from kvshield.attention import ModelConfig, scaled_dot_attention
from kvshield.errors import ShapeError, RefusalError
from kvshield.permutation import PermutationKey, all_keys, apply_columns, invert

DEFAULT_THRESHOLD = 0.99
MAX_BRUTE_FORCE_DIM = 8


@dataclass(frozen=True)
class LeakSnapshot:
    layer: int
    K_leaked: np.ndarray
    V_leaked: np.ndarray
    engine_kind: str  # "plain" or "shielded"

    def __post_init__(self):
        if self.engine_kind not in ("plain", "shielded"):
            raise ValueError(f"unknown engine kind {self.engine_kind!r}")
        if self.K_leaked.ndim != 2 or self.K_leaked.shape != self.V_leaked.shape:
            raise ShapeError(f"leaked K {self.K_leaked.shape} and V {self.V_leaked.shape} disagree")

    @property
    def empty(self) -> bool:
        return self.K_leaked.shape[0] == 0

    @property
    def seq_len(self) -> int:
        return self.K_leaked.shape[0]

    @property
    def d_model(self) -> int:
        return self.K_leaked.shape[1]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, computed in float64.

    Two zero vectors count as identical (1.0); one zero vector gives 0.0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


@dataclass
class ReconstructionReport:
    engine_kind: str
    d_model: int
    heads: int
    seq_len: int
    threshold: float
    per_step_similarity: list[float] = field(default_factory=list)
    mean: float = math.nan
    max_abs_diff: float = math.nan
    verdict: str = "protected"

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ReconstructionReport":
        return cls(**json.loads(text))


def replay(snapshot: LeakSnapshot, attacker_queries: Sequence[np.ndarray], num_heads: int) -> list[np.ndarray]:
    """Attend each query over the leaked cache.

    Queries are aligned with the last ``len(attacker_queries)`` cache rows, and
    query ``i`` only sees the rows that existed when its token was decoded.
    """
    n, m = snapshot.seq_len, len(attacker_queries)
    if m > n:
        raise ShapeError(f"{m} queries but only {n} leaked cache rows")
    outs = []
    for i, q in enumerate(attacker_queries):
        upto = n - m + i + 1
        outs.append(scaled_dot_attention(q, snapshot.K_leaked[:upto], snapshot.V_leaked[:upto], num_heads))
    return outs


def run_attack(snapshot: LeakSnapshot, attacker_queries: Sequence[np.ndarray],
               victim_truth: Sequence[np.ndarray], cfg: ModelConfig,
               threshold: float = DEFAULT_THRESHOLD) -> ReconstructionReport:
    if snapshot.empty:
        raise ShapeError("cannot attack an empty snapshot")
    if len(attacker_queries) != len(victim_truth):
        raise ShapeError(f"{len(attacker_queries)} queries vs {len(victim_truth)} truth rows")
    if snapshot.d_model != cfg.d_model:
        raise ShapeError(f"snapshot width {snapshot.d_model} != d_model {cfg.d_model}")
    outs = replay(snapshot, attacker_queries, cfg.num_heads)
    sims = [cosine_similarity(o, t) for o, t in zip(outs, victim_truth)]
    diff = max(float(np.max(np.abs(np.asarray(o, np.float64) - np.asarray(t, np.float64))))
               for o, t in zip(outs, victim_truth))
    mean = float(np.mean(sims))
    return ReconstructionReport(
        engine_kind=snapshot.engine_kind, d_model=cfg.d_model, heads=cfg.num_heads,
        seq_len=snapshot.seq_len, threshold=threshold, per_step_similarity=sims,
        mean=mean, max_abs_diff=diff,
        verdict="reconstructed" if mean >= threshold else "protected",
    )


def unpermute_snapshot(snapshot: LeakSnapshot, key: PermutationKey) -> LeakSnapshot:
    """Undo ``key`` on a leaked snapshot (what an attacker holding the key would do)."""
    inv = invert(key)
    return LeakSnapshot(snapshot.layer, apply_columns(snapshot.K_leaked, inv),
                        apply_columns(snapshot.V_leaked, inv), snapshot.engine_kind)


def brute_force_key_recovery(snapshot: LeakSnapshot, attacker_queries: Sequence[np.ndarray],
                             victim_truth: Sequence[np.ndarray], cfg: ModelConfig,
                             threshold: float = DEFAULT_THRESHOLD) -> tuple[PermutationKey | None, int]:
    """Try every key on ``range(d_model)``; return the unique one that reconstructs.

    Returns ``(None, tries)`` when no candidate, or more than one, reaches the
    threshold. ``tries`` is always ``d_model!``.
    """
    d = snapshot.d_model
    if d > MAX_BRUTE_FORCE_DIM:
        raise RefusalError(f"refusing a {d}!-candidate search (limit d_model <= {MAX_BRUTE_FORCE_DIM})")
    tries = 0
    winners: list[tuple[float, PermutationKey]] = []
    for key in all_keys(d):
        tries += 1
        report = run_attack(unpermute_snapshot(snapshot, key), attacker_queries, victim_truth, cfg, threshold)
        if report.verdict == "reconstructed":
            winners.append((report.mean, key))
    if len(winners) != 1:
        return None, tries
    return winners[0][1], tries


def value_multiset_preserved(snapshot: LeakSnapshot, K_plain: np.ndarray, V_plain: np.ndarray,
                             atol: float = 0.0) -> bool:
    """Whether every leaked row holds the values of the plaintext row, up to ``atol``.

    Column permutation hides positions, not values; this is reported as an
    informational finding alongside attack results.
    """
    if snapshot.K_leaked.shape != K_plain.shape or snapshot.V_leaked.shape != V_plain.shape:
        return False
    def same(a, b):
        return np.allclose(np.sort(a, axis=1), np.sort(b, axis=1), rtol=0.0, atol=atol)
    return bool(same(snapshot.K_leaked, K_plain) and same(snapshot.V_leaked, V_plain))
