"""Permutation overhead sweep: weight vs. result, gather vs. 0/1 matmul, chunked vs. not.

Absolute numbers are host-specific; the interesting output is the ordering
(weights cost far more than result rows; both grow with d).

    python scripts/bench_permutation.py --sizes 768 3584 4096 --reps 30 --out bench.jsonl
"""

import argparse

from kvshield.bench import bench_permute, write_records
from kvshield.shield import BUDGET_PRESETS, SecureWorldContext


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sizes", type=int, nargs="+", default=[768, 3584, 4096])
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--budget-preset", default="hikey960", choices=sorted(BUDGET_PRESETS))
    p.add_argument("--precision", default="f32")
    p.add_argument("--out")
    args = p.parse_args()

    ctx = SecureWorldContext.from_preset(args.budget_preset)
    records = []
    for d in args.sizes:
        chunk = ctx.default_chunk_rows(d, 4 if args.precision == "f32" else 8)
        for method in ("gather", "matrix_01"):
            for target, chunk_rows in (("weight", None), ("weight", chunk), ("result", None)):
                r = bench_permute(d, method, target, reps=args.reps, warmup=args.warmup,
                                  chunk_rows=chunk_rows, precision=args.precision)
                records.append(r)
                print(f"{r.operation:<15} d={d:<5} {method:<10} chunk={str(chunk_rows or '-'):<5} "
                      f"mean={r.mean:.3e}s min={r.min:.3e}s")
    if args.out:
        write_records(args.out, records)


if __name__ == "__main__":
    main()
