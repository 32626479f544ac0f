"""Overfit the default model on 8 planar pairs and report loss ratio and match recall."""
import argparse
import time

import numpy as np

from tp3m import geomeval as G
from tp3m import pipeline as PL
from tp3m import synthgen as sg
from tp3m import train as T


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit", help="directory for model.ckpt and curves")
    ap.add_argument("--pairs", type=int, default=8)
    args = ap.parse_args()

    t0 = time.perf_counter()
    samples = [sg.gen_planar(s) for s in range(args.pairs)]
    res = T.train(samples, T.TrainConfig(), out_dir=args.out)
    curve = np.array([[float(v) for v in line.split("\t")] for line in res.curve])
    print(f"steps {len(curve)}  L_total {curve[0, 1]:.4f} -> {curve[-1, 1]:.4f}  "
          f"ratio {curve[-1, 1] / curve[0, 1]:.4f}  ({time.perf_counter() - t0:.0f}s)")
    for k, s in enumerate(samples):
        ms = PL.match_pair(res.model, s.image_a, s.image_b).matches
        rec = G.grid_recall(ms.src, ms.dst, s.gt_ab[:, :2], lambda p, H=s.H_ab: sg.apply_homography(H, p))
        print(f"pair {k}  matches {len(ms)}  recall {rec:.3f}")


if __name__ == "__main__":
    main()
