"""Attention-schedule ablation: cost of each schedule at full scale, then an
optional desk-scale training comparison on phantoms.

    python demos/ablation_costs.py            # costs only (instant)
    python demos/ablation_costs.py 200        # plus 200 toy8 iterations per feasible schedule
"""

import sys

from lhunet import analyzer, archconfig as A, network, trainloop
from lhunet.dataio import PhantomSpec, make_phantom


def phantoms(n=4, seed=0):
    out = []
    for i in range(n):
        img, lab = make_phantom(PhantomSpec(seed=seed + i))
        out.append((img.voxels, lab.voxels[0].astype("int64")))
    return out


def main(iters=0):
    brats = A.preset("brats")[0]
    specs = [brats.with_schedule(s) for s in A.table4_schedules()]
    print(analyzer.render_table(analyzer.compare(specs)))

    # where the cost sits, stage by stage
    rep = analyzer.analyze(brats)
    print("\nper-stage cost of SSC-DDD:")
    for stage, (p, f) in rep.by_stage().items():
        print(f"  {stage:<14}{p / 1e6:8.3f} M {f / 1e9:9.3f} G")

    if not iters:
        return
    toy, train = A.preset("toy8")
    data = phantoms()
    print(f"\ntoy8 training, {iters} iterations per schedule")
    for s in A.table4_schedules():
        try:
            spec = A.check(toy.with_schedule(s))
        except A.ConfigError as e:
            print(f"  {s:<8} skipped: {e}")
            continue
        net = network.build(spec, seed=0)
        res = trainloop.train(net, data, train, iters=iters, seed=0)
        print(f"  {s:<8} {network.count_parameters(net):>9,} params  best val DSC {res.best_dsc:.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
