"""Complexity calibration of the shipped stage widths.

Reports params and FLOPs for the full-size presets, then repeats the small
grid search that picked ``DEFAULT_WIDTHS``: every candidate width tuple is
scored by its worst relative error against the three published totals
(brats params and FLOPs, la params) and must keep the ablation ordering.

    python demos/complexity_calibration.py [--full]
"""

import dataclasses
import sys

from lhunet import analyzer, archconfig as A

TARGETS = {"brats params": 10.48e6, "brats FLOPs": 57.43e9, "la params": 8.53e6}


def totals(widths):
    brats = dataclasses.replace(A.preset("brats")[0], stage_widths=widths)
    la = dataclasses.replace(A.preset("la")[0], stage_widths=widths)
    rb, rl = analyzer.analyze(brats), analyzer.analyze(la)
    return brats, {"brats params": rb.total_params, "brats FLOPs": rb.total_flops, "la params": rl.total_params}


def ordering_holds(brats):
    p = {s: analyzer.analyze(brats.with_schedule(s)).total_params for s in A.table4_schedules()}
    return (p["SSC-DDD"] > p["SCC-DDD"] > p["CCC-DDD"]
            and p["SSC-DDD"] > p["SSC-DDI"] > p["SSC-LLL"] > p["SSC-III"]
            and all(p["SC-DD"] < v for s, v in p.items() if s != "SC-DD"))


def main(full=False):
    print("== presets at the shipped widths", A.DEFAULT_WIDTHS)
    for name in ("brats", "la", "synapse", "lung", "toy8", "micro"):
        rep = analyzer.analyze(A.preset(name)[0])
        print(f"  {name:<8} {rep.total_params / 1e6:7.3f} M params  {rep.total_flops / 1e9:9.3f} G FLOPs")

    _, t = totals(A.DEFAULT_WIDTHS)
    for k, target in TARGETS.items():
        print(f"  {k:<13} {t[k]:>16,}  vs {target:,.0f}  ({t[k] / target - 1:+.1%})")

    print("\n== width grid search (doubling first two stages, deeper stages free)")
    cands = sorted({b * 2 ** k for b in range(12, 21) for k in range(6)})
    first = (32, 36, 40) if full else (36,)
    found = []
    for w0 in first:
        for w2 in (c for c in cands if 3 * w0 <= c <= 5 * w0 and c % 4 == 0):
            for w3 in (c for c in cands if w2 < c <= 2 * w2 and c % 4 == 0):
                for w4 in (c for c in cands if w3 <= c <= 2 * w3 and c % 4 == 0):
                    w = (w0, 2 * w0, w2, w3, w4)
                    brats, t = totals(w)
                    err = max(abs(t[k] / v - 1) for k, v in TARGETS.items())
                    if err <= 0.15 and ordering_holds(brats):
                        found.append((err, w))
    found.sort()
    print(f"  {len(found)} width tuples within 15% of all three totals; best five:")
    for err, w in found[:5]:
        print(f"    {w}  worst error {err:.3f}")


if __name__ == "__main__":
    main(full="--full" in sys.argv)
