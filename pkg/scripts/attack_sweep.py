"""Monte-Carlo sweep of the leak attack over seeds.

Writes per-seed mean cosine similarities for the plain leak, the shielded
leak and the shielded leak undone with the true key, plus summary stats.

    python scripts/attack_sweep.py --d-model 16 --heads 2 --seeds 100 --out tests/data/attack_sweep_d16_h2.json
"""

import argparse
import json

import numpy as np

from kvshield.attention import ModelConfig
from kvshield.experiments import attack_trial


def sweep(d_model, heads, seq_len, seeds, precision="f64", threshold=0.99):
    cfg = ModelConfig(d_model, heads, precision=precision)
    rows = []
    for seed in range(seeds):
        t = attack_trial(cfg, seq_len, seed, threshold)
        rows.append({"seed": seed, "plain": t.plain.mean, "shielded": t.shielded.mean, "true_key": t.true_key.mean})
    shielded = np.array([r["shielded"] for r in rows])
    return {
        "config": {"d_model": d_model, "heads": heads, "seq_len": seq_len, "precision": precision,
                   "threshold": threshold, "seeds": seeds},
        "summary": {
            "shielded_mean": float(shielded.mean()),
            "shielded_max": float(shielded.max()),
            "shielded_quantiles": {q: float(np.quantile(shielded, float(q))) for q in ("0.05", "0.5", "0.95")},
            "protected_trials": int((shielded < threshold).sum()),
            "plain_min": min(r["plain"] for r in rows),
            "true_key_min": min(r["true_key"] for r in rows),
        },
        "trials": rows,
    }


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--precision", default="f64")
    p.add_argument("--out")
    args = p.parse_args()
    result = sweep(args.d_model, args.heads, args.seq_len, args.seeds, args.precision)
    text = json.dumps(result, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(json.dumps(result["summary"], indent=1))


if __name__ == "__main__":
    main()
