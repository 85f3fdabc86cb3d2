#!/usr/bin/env python3
"""Seeded pilot: trains the standard desk-scale models and prints the
measured margin for every training-dependent acceptance assertion.

This is the procedure that calibrated the pinned thresholds in
tests/test_acceptance.py.  Models, data, and seeds are identical to the
acceptance suite (ralab.experiments); checkpoints are cached under --out
so a re-run only retrains what is missing.
"""

import argparse
import os
import sys
import time

import numpy as np

from ralab import experiments as ex
from ralab.bench import BenchConfig, bench_throughput, encoder_encode_fn
from ralab.direction import LayerSchedule
from ralab.evaluation import (direction_matrix, length_generalization_matrix,
                              report_row, write_report_csv)


def check(name, value, op, threshold):
    ok = {"<=": value <= threshold, ">=": value >= threshold}[op]
    print(f"  {name}: {value:.4f} (need {op} {threshold})  "
          f"{'pass' if ok else 'MARGIN MISS'}")
    return ok


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pilot")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    t_start = time.time()

    names = ["mha_sf", "birwkv_sf", "mha_lf", "birwkv_lf",
             "plainbi_sf", "dirdrop_both_sf"]
    models = {}
    for name in names:
        t0 = time.time()
        models[name] = ex.train_recipe(name, cache_dir=args.out)
        print(f"{name}: ready in {time.time() - t0:.0f}s")

    ok = True
    sf1, sf16 = ex.SF_TRAIN_FRAMES, 16 * ex.SF_TRAIN_FRAMES

    print("\n== length generalization (criterion 6) ==")
    lfxl = ex.eval_split("LFXL", 30, salt=13)
    table = length_generalization_matrix(
        {n: models[n] for n in ("mha_sf", "birwkv_sf", "mha_lf", "birwkv_lf")},
        lfxl, [sf1, sf16], batch_size=8)
    rows = [report_row(rep, model=n, chunk_size=c) for (n, c), rep in table.items()]
    write_report_csv(os.path.join(args.out, "length_matrix.csv"), rows)
    ratios = {n: table[(n, sf16)].wer / table[(n, sf1)].wer
              for n in ("mha_sf", "birwkv_sf", "mha_lf", "birwkv_lf")}
    for n, r in ratios.items():
        print(f"  {n}: wer {table[(n, sf1)].wer:.4f} -> {table[(n, sf16)].wer:.4f} "
              f"(ratio {r:.3f})")
    ok &= check("mha_sf ratio", ratios["mha_sf"], ">=", 1.3)
    ok &= check("birwkv_sf ratio", ratios["birwkv_sf"], "<=", 1.15)
    ok &= check("mha_lf ratio", ratios["mha_lf"], "<=", 1.1)
    ok &= check("birwkv_lf ratio", ratios["birwkv_lf"], "<=", 1.1)

    print("\n== direction dropout (criterion 7) ==")
    sf_eval = ex.eval_split("SF", 1500, salt=9)
    n_layers = models["dirdrop_both_sf"].cfg.n_layers
    base_scheds = {s: LayerSchedule.parse(s, n_layers)
                   for s in ("l2r", "r2l", "alt", "bi")}
    plain = direction_matrix(models["plainbi_sf"], sf_eval,
                             {"l2r": base_scheds["l2r"], "bi": base_scheds["bi"]},
                             batch_size=8)
    ddrop = direction_matrix(models["dirdrop_both_sf"], sf_eval, base_scheds,
                             batch_size=8)
    rows = [report_row(r, model="plainbi_sf", schedule=s) for s, r in plain.items()]
    rows += [report_row(r, model="dirdrop_both_sf", schedule=s) for s, r in ddrop.items()]
    write_report_csv(os.path.join(args.out, "direction_matrix.csv"), rows)
    for tag, tab in (("plainbi", plain), ("dirdrop", ddrop)):
        print(f"  {tag}: " + " ".join(f"{s}={r.wer:.4f}" for s, r in tab.items()))
    ok &= check("7a plain-bi l2r/bi", plain["l2r"].wer / plain["bi"].wer, ">=", 1.3)
    sym = abs(ddrop["l2r"].wer - ddrop["r2l"].wer) / max(ddrop["l2r"].wer, ddrop["r2l"].wer)
    ok &= check("7b |l2r-r2l| relative", sym, "<=", 0.10)
    ok &= check("7c alt vs l2r", ddrop["alt"].wer / ddrop["l2r"].wer, "<=", 1.0)
    ok &= check("7d dirdrop-bi vs plain-bi", ddrop["bi"].wer,
                "<=", plain["bi"].wer * 1.02)

    print("\n== schedule mechanics (criterion 8) ==")
    ladder = ["l2r", "last_bi:1", "last_bi:3", "last_bi:6", "bi"]
    alt_ladder = ["alt", "last_bi:1@alt", "last_bi:3@alt", "last_bi:6@alt", "bi"]
    model = models["dirdrop_both_sf"]
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(8000, model.cfg.d_in)).astype(np.float32)
    for base_name, specs in (("l2r", ladder), ("alt", alt_ladder)):
        errs, mps = [], []
        for s in specs:
            sched = LayerSchedule.parse(s, n_layers)
            rep = direction_matrix(model, sf_eval, {s: sched}, batch_size=8)[s]
            bench = bench_throughput(
                encoder_encode_fn(model, sched), feats,
                BenchConfig(chunk_sizes=[8000], batch_size=4, warmup_queries=1,
                            repeats=3, total_frames=8000))
            errs.append(rep.wer)
            mps.append(bench.cell(8000).mps)
        print(f"  base {base_name}: err " + " -> ".join(f"{e:.4f}" for e in errs))
        print(f"  base {base_name}: mps " + " -> ".join(f"{m:.2f}" for m in mps))
        ok &= check(f"8 err monotone ({base_name})",
                    max(b - a for a, b in zip(errs, errs[1:])), "<=", 0.0)
        ok &= check(f"8 mps monotone ({base_name})",
                    max(b - a for a, b in zip(mps, mps[1:])), "<=", 0.0)

    print(f"\npilot finished in {(time.time() - t_start) / 60:.1f} min; "
          f"{'all margins clear' if ok else 'SOME MARGINS MISSED'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
