"""Permutation-shielded attention over a simulated secure/insecure partition.

The secure world (:class:`SecureWorldContext`) owns the per-layer keys and a
trusted memory budget. At init it permutes the columns of each layer's
``w_q``, ``w_k`` and ``w_v`` block by block. At runtime it receives the
permuted attention output ``a_p`` and returns ``a = a_p`` with the key undone.

The insecure world (:class:`InsecureWorldState`) holds only permuted weights,
the permuted KV cache and permuted scratch activations. Everything crossing
between the two is logged on a :class:`WorldChannel`.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from kvshield import linalg
from kvshield.attack import LeakSnapshot
from kvshield.attention import (
    AttentionWeights,
    KVCache,
    ModelConfig,
    qkv_project,
    scaled_dot_attention,
)
from kvshield.bench import KvSizeQuery, kv_cache_size
from kvshield.errors import BudgetError, InvalidDimensionError, ShapeError, WorldMismatchError, ConfigError
from kvshield.keystore import read_keystore, write_keystore
from kvshield.permutation import (
    PermutationKey,
    apply_columns,
    generate_head_aligned_key,
    invert,
    is_head_aligned,
)

MiB = 1 << 20

# TrustZone DRAM sizes of common SoCs
BUDGET_PRESETS = {
    "rk3399": 32 * MiB,
    "mt8173": 30 * MiB,
    "hikey960": 16 * MiB,
    "rpi3": 15 * MiB,
}

KEY_INDEX_BYTES = np.dtype(np.intp).itemsize

TO_SECURE = "insecure->secure"
TO_INSECURE = "secure->insecure"


class TrustedMemory:
    """Tracks bytes resident in the secure world and refuses to exceed the budget."""

    def __init__(self, budget_bytes: int):
        if budget_bytes < 1:
            raise BudgetError(f"budget must be positive, got {budget_bytes}")
        self.budget_bytes = budget_bytes
        self.in_use = 0
        self.peak = 0

    def reserve(self, nbytes: int, label: str = "") -> None:
        if self.in_use + nbytes > self.budget_bytes:
            raise BudgetError(
                f"{label or 'allocation'} of {nbytes} B would bring trusted memory to "
                f"{self.in_use + nbytes} B, over the {self.budget_bytes} B budget")
        self.in_use += nbytes
        self.peak = max(self.peak, self.in_use)

    def release(self, nbytes: int) -> None:
        self.in_use -= nbytes

    @contextmanager
    def hold(self, nbytes: int, label: str = ""):
        self.reserve(nbytes, label)
        try:
            yield
        finally:
            self.release(nbytes)


@dataclass(frozen=True)
class Transfer:
    step: int | None
    layer: int
    direction: str
    kind: str
    bytes: int


class WorldChannel:
    """Append-only log of every secure/insecure transfer."""

    def __init__(self):
        self.log: list[Transfer] = []

    def record(self, step, layer, direction, kind, nbytes) -> None:
        self.log.append(Transfer(step, layer, direction, kind, int(nbytes)))

    def activation_transfers(self) -> list[Transfer]:
        return [t for t in self.log if t.step is not None]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(t)) + "\n" for t in self.log)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @staticmethod
    def read_jsonl(path) -> list[Transfer]:
        return [Transfer(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


def working_set_bytes(rows: int, d_model: int, scalar_bytes: int) -> int:
    """Trusted bytes needed to permute a ``rows x d_model`` block (input plus output)."""
    return 2 * rows * d_model * scalar_bytes


class SecureWorldContext:
    """Keystore, trusted memory accountant and channel of one shielded session."""

    def __init__(self, budget_bytes: int = BUDGET_PRESETS["rk3399"], chunk_rows: int | None = None,
                 channel: WorldChannel | None = None):
        self.memory = TrustedMemory(budget_bytes)
        self.chunk_rows = chunk_rows
        self.channel = channel or WorldChannel()
        self._keys: dict[int, PermutationKey] = {}

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "SecureWorldContext":
        try:
            return cls(BUDGET_PRESETS[name], **kwargs)
        except KeyError:
            raise ConfigError(f"unknown budget preset {name!r}; choose from {sorted(BUDGET_PRESETS)}") from None

    @classmethod
    def from_keystore(cls, path, budget_bytes: int = BUDGET_PRESETS["rk3399"], **kwargs):
        """Load sealed keys; returns ``(ctx, model_id)``."""
        model_id, keys = read_keystore(path)
        ctx = cls(budget_bytes, **kwargs)
        for layer, key in keys.items():
            ctx.install_key(layer, key)
        return ctx, model_id

    @property
    def budget_bytes(self) -> int:
        return self.memory.budget_bytes

    @property
    def num_keys(self) -> int:
        return len(self._keys)

    def install_key(self, layer: int, key: PermutationKey) -> None:
        if layer in self._keys:
            raise ValueError(f"layer {layer} already has a key")
        self.memory.reserve(key.dim * KEY_INDEX_BYTES, f"key for layer {layer}")
        self._keys[layer] = key

    def export_keystore(self, path, model_id: str) -> None:
        write_keystore(path, model_id, self._keys)

    def reveal_key(self, layer: int) -> PermutationKey:
        """Oracle access for tests and demos; nothing in the insecure world calls this."""
        return self._keys[layer]

    def default_chunk_rows(self, d_model: int, scalar_bytes: int) -> int:
        """Largest row block whose working set fits in half the budget."""
        rows = (self.budget_bytes // 2) // working_set_bytes(1, d_model, scalar_bytes)
        if rows < 1:
            raise BudgetError(f"budget of {self.budget_bytes} B cannot hold even one {d_model}-wide row block")
        return min(rows, d_model)

    def check_chunk_rows(self, d_model: int, scalar_bytes: int, extra_resident: int = 0) -> int:
        """Resolve the configured chunk size and reject it if it cannot fit."""
        rows = self.chunk_rows if self.chunk_rows is not None else self.default_chunk_rows(d_model, scalar_bytes)
        if rows < 1:
            raise BudgetError(f"chunk_rows must be >= 1, got {rows}")
        rows = min(rows, d_model)
        need = self.memory.in_use + extra_resident + working_set_bytes(rows, d_model, scalar_bytes)
        if need > self.budget_bytes:
            raise BudgetError(
                f"chunk of {rows} rows needs {need} B of trusted memory, budget is {self.budget_bytes} B")
        return rows

    def permute_weight(self, layer: int, w: np.ndarray) -> np.ndarray:
        """Column-permute ``w`` with the layer key, ``chunk_rows`` rows at a time."""
        key = self._keys[layer]
        d = w.shape[0]
        if w.shape != (d, key.dim):
            raise ShapeError(f"weight of shape {w.shape} does not match key dim {key.dim}")
        rows = self.check_chunk_rows(key.dim, w.dtype.itemsize)
        out = np.empty_like(w)
        for r0 in range(0, d, rows):
            r1 = min(d, r0 + rows)
            nbytes = (r1 - r0) * key.dim * w.dtype.itemsize
            with self.memory.hold(nbytes, "plain weight block"):
                block = w[r0:r1].copy()
                with self.memory.hold(nbytes, "permuted weight block"):
                    out[r0:r1] = apply_columns(block, key)
        self.channel.record(None, layer, TO_INSECURE, "permuted_weight", w.nbytes)
        return out

    def unpermute_activation(self, layer: int, a_p: np.ndarray, step: int) -> np.ndarray:
        key = self._keys[layer]
        if a_p.shape != (1, key.dim):
            raise ShapeError(f"expected a 1x{key.dim} activation, got {a_p.shape}")
        self.channel.record(step, layer, TO_SECURE, "attention_permuted", a_p.nbytes)
        with self.memory.hold(2 * a_p.nbytes, "activation"):
            a = apply_columns(a_p, invert(key))
        self.channel.record(step, layer, TO_INSECURE, "attention", a.nbytes)
        return a


@dataclass
class InsecureWorldState:
    """Everything the untrusted side holds. Never contains keys or plaintext K/V."""

    cfg: ModelConfig
    weights: list[AttentionWeights]
    cache: KVCache
    scratch: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not all(w.permuted for w in self.weights):
            raise WorldMismatchError("insecure world may only hold permuted weights")
        if not self.cache.permuted:
            raise WorldMismatchError("insecure world may only hold a permuted cache")
        if not self.scratch:
            self.scratch = [None] * len(self.weights)


def shield_init(w_plain: list[AttentionWeights], seeds: list[int], cfg: ModelConfig,
                ctx: SecureWorldContext, *, keys: list[PermutationKey] | None = None,
                allow_unsafe: bool = False) -> InsecureWorldState:
    """Permute every layer's q/k/v projections inside the secure world.

    One key per layer is shared by ``w_q``, ``w_k`` and ``w_v``. ``keys``
    overrides seeded generation (test hook); keys that are not head-aligned
    are refused for multi-head configs unless ``allow_unsafe`` is set.
    """
    if len(w_plain) != cfg.num_layers:
        raise ShapeError(f"config has {cfg.num_layers} layers, got {len(w_plain)} weight sets")
    if keys is None:
        if len(seeds) != cfg.num_layers:
            raise ShapeError(f"need one seed per layer, got {len(seeds)}")
        keys = [generate_head_aligned_key(s, cfg.num_heads, cfg.head_dim) for s in seeds]
    elif len(keys) != cfg.num_layers:
        raise ShapeError(f"need one key per layer, got {len(keys)}")
    for layer, (w, key) in enumerate(zip(w_plain, keys)):
        if w.permuted:
            raise WorldMismatchError(f"layer {layer} weights are already permuted")
        if w.d_model != cfg.d_model or key.dim != cfg.d_model:
            raise ShapeError(f"layer {layer}: weights/key do not match d_model={cfg.d_model}")
        if cfg.num_heads > 1 and not allow_unsafe and not is_head_aligned(key, cfg.num_heads, cfg.head_dim):
            raise InvalidDimensionError(f"layer {layer}: key is not head-aligned for {cfg.num_heads} heads")
    # fail before installing anything if the block size cannot fit
    ctx.check_chunk_rows(cfg.d_model, cfg.scalar_bytes, cfg.num_layers * cfg.d_model * KEY_INDEX_BYTES)

    permuted = []
    for layer, (w, key) in enumerate(zip(w_plain, keys)):
        ctx.install_key(layer, key)
        permuted.append(AttentionWeights(
            w_q=ctx.permute_weight(layer, w.w_q),
            w_k=ctx.permute_weight(layer, w.w_k),
            w_v=ctx.permute_weight(layer, w.w_v),
            w_o=None if w.w_o is None else w.w_o.copy(),
            permuted=True,
        ))
    cache = KVCache(cfg.num_layers, cfg.d_model, cfg.dtype, permuted=True)
    return InsecureWorldState(cfg, permuted, cache)


def shielded_layer(x: np.ndarray, world: InsecureWorldState, ctx: SecureWorldContext, layer: int):
    """One shielded layer step; returns ``(a, out)`` with ``a`` taken before ``w_o``."""
    w = world.weights[layer]
    if not w.permuted:
        raise WorldMismatchError("plain weights reached the shielded path")
    q_p, k_p, v_p = qkv_project(x, w)
    world.cache.append(layer, k_p, v_p)
    a_p = scaled_dot_attention(q_p, world.cache.keys(layer), world.cache.values(layer), world.cfg.num_heads)
    world.scratch[layer] = a_p
    a = ctx.unpermute_activation(layer, a_p, world.cache.seq_len(layer) - 1)
    out = a if w.w_o is None else linalg.matmul(a, w.w_o)
    return a, out


def shielded_decode_step(x: np.ndarray, world: InsecureWorldState, ctx: SecureWorldContext,
                         layer: int) -> np.ndarray:
    return shielded_layer(x, world, ctx, layer)[1]


def shielded_decode(xs: np.ndarray, world: InsecureWorldState, ctx: SecureWorldContext) -> list[np.ndarray]:
    """Feed the rows of ``xs`` through every layer; returns final-layer outputs."""
    xs = linalg.as_matrix(xs, world.cfg.precision)
    outputs = []
    for t in range(xs.shape[0]):
        h = xs[t:t + 1]
        for layer in range(world.cfg.num_layers):
            h = shielded_decode_step(h, world, ctx, layer)
        outputs.append(h)
    return outputs


def leak_kv(source: InsecureWorldState | KVCache, layer: int) -> LeakSnapshot:
    """Copy what an attacker reading the untrusted cache would see."""
    cache = source.cache if isinstance(source, InsecureWorldState) else source
    kind = "shielded" if cache.permuted else "plain"
    return LeakSnapshot(layer, cache.keys(layer).copy(), cache.values(layer).copy(), kind)


@dataclass(frozen=True)
class BudgetEntry:
    kind: str
    bytes: int
    fits: bool
    note: str = ""


@dataclass
class BudgetReport:
    budget_bytes: int
    entries: list[BudgetEntry]

    def entry(self, kind: str) -> BudgetEntry:
        return next(e for e in self.entries if e.kind == kind)

    def to_table(self) -> str:
        lines = [f"trusted memory budget: {_fmt_bytes(self.budget_bytes)}",
                 f"{'artifact':<20}{'size':>14}  {'fits':<5} note"]
        for e in self.entries:
            lines.append(f"{e.kind:<20}{_fmt_bytes(e.bytes):>14}  {'yes' if e.fits else 'no':<5} {e.note}")
        return "\n".join(lines)


def _fmt_bytes(n: int) -> str:
    for unit, size in (("GiB", 1 << 30), ("MiB", MiB), ("KiB", 1 << 10)):
        if n >= size:
            return f"{n / size:.2f} {unit}"
    return f"{n} B"


def budget_check(cfg: ModelConfig, ctx: SecureWorldContext, seq_len: int = 1000) -> BudgetReport:
    """Sizes of the attention vector, one weight matrix and the full KV cache vs. the budget."""
    sb = cfg.scalar_bytes
    budget = ctx.budget_bytes
    vector = cfg.d_model * sb
    weight = cfg.d_model * cfg.d_model * sb
    kv = kv_cache_size(KvSizeQuery(cfg.num_kv_heads, cfg.head_dim, cfg.num_layers, seq_len, sb))
    if weight <= budget:
        weight_note = "whole matrix fits"
    else:
        try:
            weight_note = f"chunking required: {ctx.default_chunk_rows(cfg.d_model, sb)} rows per block"
        except BudgetError:
            weight_note = "not permutable even one row at a time"
    entries = [
        BudgetEntry("attention_vector", vector, 2 * vector <= budget, "in + out copy"),
        BudgetEntry("weight_matrix", weight, weight <= budget, weight_note),
        BudgetEntry("kv_cache", kv, kv <= budget, f"{cfg.num_layers} layers, seq_len={seq_len}"),
    ]
    return BudgetReport(budget, entries)
