"""KV-cache size arithmetic and permutation overhead benchmarks."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from kvshield import linalg
from kvshield.errors import InvalidDimensionError, RefusalError
from kvshield.permutation import apply_columns, generate_key, to_matrix

KiB = 1 << 10
MiB = 1 << 20


@dataclass(frozen=True)
class KvSizeQuery:
    kv_heads: int
    head_dim: int
    layer_num: int
    seq_len: int = 1
    scalar_bytes: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise InvalidDimensionError(f"{name} must be >= 1, got {value}")


def kv_cache_size(q: KvSizeQuery) -> int:
    """Bytes of K and V across all layers: 2 * kv_heads * head_dim * layers * seq_len * scalar."""
    return 2 * q.kv_heads * q.head_dim * q.layer_num * q.seq_len * q.scalar_bytes


# (kv_heads, head_dim, layers, d_model, num_heads)
MODEL_PRESETS = {
    "llama2-7b": (32, 128, 32, 4096, 32),
    "chatglm3-6b": (2, 128, 28, 4096, 32),
    "qwen2-7b": (4, 128, 28, 3584, 28),
}


def preset_query(name: str, seq_len: int = 1, scalar_bytes: int = 4) -> KvSizeQuery:
    kv_heads, head_dim, layers, _, _ = MODEL_PRESETS[name]
    return KvSizeQuery(kv_heads, head_dim, layers, seq_len, scalar_bytes)


@dataclass
class BenchRecord:
    operation: str  # permute_weight | permute_result
    d_model: int
    method: str  # matrix_01 | gather
    repetitions: int
    mean: float
    min: float
    max: float
    chunk_rows: int | None = None
    precision: str = "f32"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0.0 <= self.min <= self.mean <= self.max:
            raise ValueError(f"inconsistent timings min={self.min} mean={self.mean} max={self.max}")


METHODS = ("matrix_01", "gather")
TARGETS = ("weight", "result")
DEFAULT_MEMORY_LIMIT = 2 << 30


def _permute(m: np.ndarray, key, method: str, matrix: np.ndarray | None, chunk_rows: int | None) -> np.ndarray:
    if chunk_rows is None or chunk_rows >= m.shape[0]:
        return apply_columns(m, key) if method == "gather" else linalg.matmul_fast(m, matrix)
    out = np.empty_like(m)
    for r0 in range(0, m.shape[0], chunk_rows):
        blk = m[r0:r0 + chunk_rows]
        out[r0:r0 + chunk_rows] = apply_columns(blk, key) if method == "gather" else linalg.matmul_fast(blk, matrix)
    return out


def time_call(fn, reps: int, warmup: int, inner: int = 1) -> list[float]:
    """Per-call wall times from a monotonic clock; warm-up calls are discarded."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return times


def bench_permute(d_model: int, method: str, target: str, reps: int = 30, warmup: int = 5,
                  chunk_rows: int | None = None, precision: str = "f32", seed: int = 0,
                  inner: int | None = None, memory_limit: int = DEFAULT_MEMORY_LIMIT) -> BenchRecord:
    """Time one permutation of a ``d x d`` weight or a ``1 x d`` result row.

    Both methods are run once on the input and must agree bit-exactly before
    any timing. ``inner`` calls are batched per repetition so that tiny
    workloads stay above clock resolution; by default it is picked to make a
    repetition last about a millisecond.
    """
    if method not in METHODS or target not in TARGETS:
        raise ValueError(f"method must be one of {METHODS}, target one of {TARGETS}")
    if reps < 1 or d_model < 1:
        raise InvalidDimensionError("reps and d_model must be >= 1")
    dtype = linalg.dtype_of(precision)
    itemsize = np.dtype(dtype).itemsize
    rows = d_model if target == "weight" else 1
    # operand, output, 0/1 matrix and the reference result
    need = (3 * rows * d_model + d_model * d_model) * itemsize
    if need > memory_limit:
        raise RefusalError(f"benchmark needs ~{need} B, over the {memory_limit} B guard")

    rng = np.random.default_rng(seed)
    m = rng.standard_normal((rows, d_model)).astype(dtype)
    key = generate_key(seed, d_model)
    matrix = to_matrix(key, dtype)
    ref = _permute(m, key, "gather", None, None)
    other = _permute(m, key, "matrix_01", matrix, chunk_rows)
    if not np.array_equal(ref, other) or not np.array_equal(ref, _permute(m, key, "gather", None, chunk_rows)):
        raise AssertionError("gather and 0/1-matrix permutation disagree")
    del ref, other

    fn = lambda: _permute(m, key, method, matrix, chunk_rows)  # noqa: E731
    if inner is None:
        t0 = time.perf_counter()
        fn()
        inner = max(1, min(10_000, int(1e-3 / max(time.perf_counter() - t0, 1e-9))))
    times = time_call(fn, reps, warmup, inner)
    mean = float(np.mean(times))
    return BenchRecord(
        operation="permute_weight" if target == "weight" else "permute_result",
        d_model=d_model, method=method, repetitions=reps,
        mean=min(max(mean, min(times)), max(times)), min=min(times), max=max(times),
        chunk_rows=chunk_rows, precision=precision,
    )


def write_records(path, records: list[BenchRecord]) -> None:
    Path(path).write_text("".join(json.dumps(asdict(r)) + "\n" for r in records))


def read_records(path) -> list[BenchRecord]:
    return [BenchRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]
