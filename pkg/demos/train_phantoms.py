"""Train the toy8 network on synthetic phantoms and watch it fit.

Writes a phantom dataset, splits it, trains with the seeded loop (log and
checkpoints land in the output directory) and reports full-volume DSC on
the training and validation volumes.

    python demos/train_phantoms.py [OUT_DIR] [ITERS]
"""

import json
import sys
from pathlib import Path

import numpy as np

from lhunet import archconfig as A, dataio, inference, network, trainloop


def mean_dsc(net, data):
    k = net.spec.out_channels
    scores = []
    for img, lab in data:
        pred = inference.predict_labels(net, img)
        scores.append(np.mean([inference.dsc(pred == c, lab == c) for c in range(1, k)]))
    return float(np.mean(scores))


def main(out="phantom_run", iters=300):
    out = Path(out)
    arch, train = A.preset("toy8")
    ids = dataio.write_phantom_dataset(out / "data", dataio.PhantomSpec(noise=0.05), count=6)
    split = dataio.split(out / "data", ratios=(4, 2))["splits"][0]
    print(f"{len(ids)} phantoms; train {split['train']}, val {split['val']}")

    train_ds = dataio.load_dataset(out / "data", split["train"])
    val_ds = dataio.load_dataset(out / "data", split["val"])
    net = network.build(arch, seed=0)
    res = trainloop.train(net, train_ds, train, iters=iters, out_dir=out / "run", seed=0, val_dataset=val_ds)

    losses = res.losses()
    for i in range(0, len(losses), max(len(losses) // 6, 1)):
        print(f"  iter {i:4d}  loss {losses[i]:.4f}")
    print(f"fusion weights before: {json.dumps(res.init_fusion)}")
    print(f"fusion weights after:  {json.dumps(res.final_fusion)}")
    print(f"train DSC {mean_dsc(net, train_ds):.4f}, val DSC {mean_dsc(net, val_ds):.4f}")
    print(f"checkpoint: {res.last_checkpoint}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "phantom_run", int(args[1]) if len(args) > 1 else 300)
