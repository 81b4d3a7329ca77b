"""Sliding-window inference on a volume larger than the training patch,
followed by DSC / HD95 evaluation.

Uses a checkpoint from ``train_phantoms.py`` if given, otherwise trains a
toy8 network briefly.

    python demos/sliding_window_inference.py [CHECKPOINT]
"""

import sys

import numpy as np

from lhunet import archconfig as A, dataio, inference, network, trainloop


def main(ckpt=None):
    if ckpt:
        net = network.load(ckpt)
    else:
        arch, train = A.preset("toy8")
        data = []
        for s in range(4):
            img, lab = dataio.make_phantom(dataio.PhantomSpec(seed=s))
            data.append((img.voxels, lab.voxels[0].astype(np.int64)))
        net = network.build(arch, seed=0)
        trainloop.train(net, data, train, iters=150, seed=0)

    # a 48 x 40 x 56 phantom: larger than the 32^3 patch along every axis
    img, lab = dataio.make_phantom(dataio.PhantomSpec(shape=(48, 40, 56), n_blobs=5, seed=123))
    plan = inference.plan_windows(img.shape[1:], net.spec.patch_size, overlap=0.5)
    print(f"{len(plan)} windows, origins per axis "
          f"{[sorted({o[a] for o in plan.origins}) for a in range(3)]}; min coverage {plan.coverage().min()}")

    probs = inference.sliding_window_predict(net, img.voxels, plan=plan)
    print(f"probabilities {probs.shape}, max |sum - 1| = {np.abs(probs.sum(0) - 1).max():.2e}")
    pred = probs.argmax(0)
    m = inference.evaluate(pred, lab.voxels[0])
    for name, c in m.per_class.items():
        print(f"  class {name}: DSC {c.dsc:.4f}  HD95 {c.hd95:.2f}  {' '.join(c.flags)}")
    print(f"mean DSC {m.mean_dsc:.4f}, mean HD95 {m.mean_hd95:.2f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
