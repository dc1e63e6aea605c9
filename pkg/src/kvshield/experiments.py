"""Seeded trials that exercise the engines end to end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvshield.attack import ReconstructionReport, run_attack, unpermute_snapshot, value_multiset_preserved
from kvshield.attention import ModelConfig, plain_decode, random_weights, recompute_uncached
from kvshield.permutation import PermutationKey
from kvshield.shield import SecureWorldContext, leak_kv, shield_init, shielded_decode

TOLERANCE = {"f32": 1e-5, "f64": 1e-12}


def layer_seeds(seed: int, num_layers: int) -> list[int]:
    """Distinct per-layer key seeds derived from one trial seed."""
    return [int(s) for s in np.random.SeedSequence([seed, 0x4B56]).generate_state(num_layers)]


def make_inputs(cfg: ModelConfig, seq_len: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    return rng.standard_normal((seq_len, cfg.d_model)).astype(cfg.dtype)


@dataclass
class EquivalenceResult:
    cfg: ModelConfig
    seq_len: int
    seed: int
    step_diffs: list[float]

    @property
    def max_abs_diff(self) -> float:
        return max(self.step_diffs)

    def passed(self, tol: float | None = None) -> bool:
        tol = TOLERANCE[self.cfg.precision] if tol is None else tol
        return self.max_abs_diff <= tol


def _step_diffs(a: list[np.ndarray], b: list[np.ndarray]) -> list[float]:
    return [float(np.max(np.abs(x.astype(np.float64) - y.astype(np.float64)))) for x, y in zip(a, b)]


def equivalence_trial(cfg: ModelConfig, seq_len: int, seed: int, keys: list[PermutationKey] | None = None,
                      allow_unsafe: bool = False, ctx: SecureWorldContext | None = None) -> EquivalenceResult:
    """Shielded vs plain decode on the same seeded weights and inputs."""
    weights = random_weights(cfg, seed)
    xs = make_inputs(cfg, seq_len, seed)
    trace, _ = plain_decode(xs, weights, cfg)
    ctx = ctx or SecureWorldContext()
    world = shield_init(weights, layer_seeds(seed, cfg.num_layers), cfg, ctx, keys=keys, allow_unsafe=allow_unsafe)
    shielded = shielded_decode(xs, world, ctx)
    return EquivalenceResult(cfg, seq_len, seed, _step_diffs(shielded, trace.outputs))


def cache_trial(cfg: ModelConfig, seq_len: int, seed: int) -> EquivalenceResult:
    """Cached decode vs recompute-from-scratch on seeded weights and inputs."""
    weights = random_weights(cfg, seed)
    xs = make_inputs(cfg, seq_len, seed)
    trace, _ = plain_decode(xs, weights, cfg)
    return EquivalenceResult(cfg, seq_len, seed, _step_diffs(trace.outputs, recompute_uncached(xs, weights, cfg)))


@dataclass
class AttackTrial:
    plain: ReconstructionReport
    shielded: ReconstructionReport
    true_key: ReconstructionReport
    multiset_preserved: bool


def attack_trial(cfg: ModelConfig, seq_len: int, seed: int, threshold: float = 0.99,
                 layer: int | None = None) -> AttackTrial:
    """Leak the plain and the shielded cache of one conversation and attack both.

    The attacker is given the victim's plaintext queries of the leaked layer;
    success is measured against the victim's true attention outputs there.
    """
    layer = cfg.num_layers - 1 if layer is None else layer
    weights = random_weights(cfg, seed)
    xs = make_inputs(cfg, seq_len, seed)
    trace, plain_cache = plain_decode(xs, weights, cfg)
    ctx = SecureWorldContext()
    world = shield_init(weights, layer_seeds(seed, cfg.num_layers), cfg, ctx)
    shielded_decode(xs, world, ctx)

    queries, truth = trace.queries[layer], trace.attention[layer]
    plain_snap = leak_kv(plain_cache, layer)
    shield_snap = leak_kv(world, layer)
    return AttackTrial(
        plain=run_attack(plain_snap, queries, truth, cfg, threshold),
        shielded=run_attack(shield_snap, queries, truth, cfg, threshold),
        true_key=run_attack(unpermute_snapshot(shield_snap, ctx.reveal_key(layer)), queries, truth, cfg, threshold),
        multiset_preserved=value_multiset_preserved(shield_snap, plain_snap.K_leaked, plain_snap.V_leaked,
                                                    atol=TOLERANCE[cfg.precision]),
    )
