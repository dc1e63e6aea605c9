"""Command-line entry point: ``kvshield {verify,attack-demo,bench,kv-size,budget}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from kvshield.attention import ModelConfig
from kvshield.bench import MODEL_PRESETS, KiB, bench_permute, kv_cache_size, preset_query, write_records
from kvshield.errors import ConfigError, KVShieldError
from kvshield.experiments import TOLERANCE, attack_trial, cache_trial, equivalence_trial
from kvshield.shield import BUDGET_PRESETS, SecureWorldContext, budget_check

DEFAULT_CONFIG = {
    "model": {"d_model": 16, "num_heads": 2, "num_layers": 2},
    "seeds": [0, 1, 2],
    "budget_preset": "rk3399",
    "precision": "f64",
    "threshold": 0.99,
    "seq_len": 16,
    "verify": {"d_models": [16, 64], "heads": [1, 2, 4], "seq_lens": [1, 16]},
    "bench": {"sizes": [768, 3584, 4096], "methods": ["gather", "matrix_01"], "reps": 30, "warmup": 5},
}

KNOWN_KEYS = set(DEFAULT_CONFIG)


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    if cfg["budget_preset"] not in BUDGET_PRESETS:
        raise ConfigError(f"unknown budget_preset {cfg['budget_preset']!r}")
    if not isinstance(cfg["seeds"], list) or not cfg["seeds"]:
        raise ConfigError("seeds must be a non-empty list of integers")
    return cfg


def _model(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "precision": cfg["precision"]})


def _emit(report_dir: Path | None, name: str, rows: list[dict]) -> None:
    if report_dir is None:
        return
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / name).write_text("".join(json.dumps(r) + "\n" for r in rows))


def cmd_verify(cfg: dict, report_dir) -> int:
    prec = cfg["precision"]
    tol = TOLERANCE[prec]
    rows, ok = [], True
    v = cfg["verify"]
    print(f"shield/cache equivalence, precision={prec}, tolerance={tol:g}")
    print(f"{'d_model':>8}{'heads':>6}{'seq':>5}  {'shield':<7}{'cache':<7}max_abs_diff")
    for d in v["d_models"]:
        for h in v["heads"]:
            for n in v["seq_lens"]:
                mc = ModelConfig(d, h, cfg["model"].get("num_layers", 1), precision=prec)
                eq = [equivalence_trial(mc, n, s) for s in cfg["seeds"]]
                ca = [cache_trial(mc, n, s) for s in cfg["seeds"]]
                s_ok, c_ok = all(r.passed() for r in eq), all(r.passed() for r in ca)
                worst = max(r.max_abs_diff for r in eq + ca)
                ok &= s_ok and c_ok
                print(f"{d:>8}{h:>6}{n:>5}  {'PASS' if s_ok else 'FAIL':<7}{'PASS' if c_ok else 'FAIL':<7}{worst:.3g}")
                rows.append({"d_model": d, "heads": h, "seq_len": n, "shield_pass": s_ok,
                             "cache_pass": c_ok, "max_abs_diff": worst, "tolerance": tol})
    _emit(report_dir, "verify.jsonl", rows)
    print("all pass" if ok else "FAILURES")
    return 0 if ok else 1


def cmd_attack_demo(cfg: dict, report_dir) -> int:
    mc = _model(cfg)
    seed = cfg["seeds"][0]
    t = attack_trial(mc, cfg["seq_len"], seed, cfg["threshold"])
    for label, rep in (("plain leak", t.plain), ("shielded leak", t.shielded), ("shielded + true key", t.true_key)):
        print(f"{label:<22} mean cosine {rep.mean:+.6f}  verdict {rep.verdict}")
    print(f"value multisets preserved by permutation (informational): {t.multiset_preserved}")
    _emit(report_dir, "attack.jsonl", [json.loads(r.to_json()) for r in (t.plain, t.shielded)])
    return 0 if (t.plain.verdict, t.shielded.verdict) == ("reconstructed", "protected") else 1


def cmd_bench(cfg: dict, report_dir, args) -> int:
    b = cfg["bench"]
    sizes = args.sizes or b["sizes"]
    reps = args.reps or b["reps"]
    records = []
    print(f"{'operation':<16}{'d':>6} {'method':<10}{'chunk':>6}{'mean (s)':>12}{'min (s)':>12}")
    for d in sizes:
        for method in b["methods"]:
            for target in ("weight", "result"):
                chunks = [None]
                if target == "weight" and args.chunk_rows:
                    chunks.append(args.chunk_rows)
                for ch in chunks:
                    r = bench_permute(d, method, target, reps=reps, warmup=b["warmup"], chunk_rows=ch,
                                      precision=cfg["precision"], seed=cfg["seeds"][0])
                    records.append(r)
                    print(f"{r.operation:<16}{d:>6} {method:<10}{str(ch or '-'):>6}{r.mean:>12.3e}{r.min:>12.3e}")
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        write_records(report_dir / "bench.jsonl", records)
    return 0


def cmd_kv_size(cfg: dict, report_dir, args) -> int:
    names = [args.preset] if args.preset else list(MODEL_PRESETS)
    rows = []
    print(f"{'model':<14}{'shape_kv':<14}{'layers':>7}{'per token':>14}{f'seq_len={args.seq_len}':>18}")
    for name in names:
        q1 = preset_query(name)
        per_tok = kv_cache_size(q1)
        total = kv_cache_size(preset_query(name, args.seq_len))
        shape = f"2x{q1.kv_heads}x{q1.head_dim}"
        print(f"{name:<14}{shape:<14}{q1.layer_num:>7}{per_tok / KiB:>10.0f} KiB{total / KiB:>14.0f} KiB")
        rows.append({"model": name, "shape_kv": shape, "layer_num": q1.layer_num,
                     "bytes_per_token": per_tok, "seq_len": args.seq_len, "bytes": total})
    _emit(report_dir, "kv_size.jsonl", rows)
    return 0


def cmd_budget(cfg: dict, report_dir, args) -> int:
    if args.preset:
        kv_heads, head_dim, layers, d_model, heads = MODEL_PRESETS[args.preset]
        mc = ModelConfig(d_model, heads, layers, kv_heads, precision=cfg["precision"])
    else:
        mc = _model(cfg)
    ctx = SecureWorldContext.from_preset(cfg["budget_preset"])
    rep = budget_check(mc, ctx, args.seq_len)
    print(rep.to_table())
    _emit(report_dir, "budget.jsonl", [asdict(e) | {"budget_bytes": rep.budget_bytes} for e in rep.entries])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("--seed", type=int, help="overrides the config's seed list with one seed")
    common.add_argument("--report-dir", type=Path, help="directory for JSON-lines reports")
    common.add_argument("--preset", choices=sorted(MODEL_PRESETS), help="model shape preset")

    p = argparse.ArgumentParser(prog="kvshield", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="shield and cache equivalence matrix")
    sub.add_parser("attack-demo", parents=[common], help="attack plain and shielded leaks")
    bench = sub.add_parser("bench", parents=[common], help="permutation overhead benchmark")
    bench.add_argument("--sizes", type=int, nargs="+")
    bench.add_argument("--reps", type=int)
    bench.add_argument("--chunk-rows", type=int, help="also time row-chunked weight permutation")
    for name in ("kv-size", "budget"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--seq-len", type=int, default=1000 if name == "budget" else 1)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.precision:
            cfg["precision"] = args.precision
        if args.seed is not None:
            cfg["seeds"] = [args.seed]
        if cfg["precision"] not in TOLERANCE:
            raise ConfigError(f"unknown precision {cfg['precision']!r}")
        if args.command == "verify":
            return cmd_verify(cfg, args.report_dir)
        if args.command == "attack-demo":
            return cmd_attack_demo(cfg, args.report_dir)
        if args.command == "bench":
            return cmd_bench(cfg, args.report_dir, args)
        if args.command == "kv-size":
            return cmd_kv_size(cfg, args.report_dir, args)
        return cmd_budget(cfg, args.report_dir, args)
    except (ConfigError, KVShieldError, TypeError, KeyError) as exc:
        print(f"kvshield: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
