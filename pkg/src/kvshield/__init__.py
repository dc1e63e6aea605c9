"""Permutation-shielded attention with a simulated secure world."""

from kvshield.attention import AttentionWeights, KVCache, ModelConfig
from kvshield.permutation import PermutationKey, generate_head_aligned_key, generate_key
from kvshield.shield import SecureWorldContext, leak_kv, shield_init, shielded_decode_step

__all__ = [
    "AttentionWeights",
    "KVCache",
    "ModelConfig",
    "PermutationKey",
    "SecureWorldContext",
    "generate_head_aligned_key",
    "generate_key",
    "leak_kv",
    "shield_init",
    "shielded_decode_step",
]
__version__ = "0.1.0"
