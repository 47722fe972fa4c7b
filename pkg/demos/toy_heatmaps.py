"""Confidence heatmaps on the four-cluster toy problem.

Trains a plain MAP network and Laplace posteriors under each OOD-aware
likelihood, then writes one PGM heatmap per model over [-10, 10]^2 and prints
the mean max confidence near the data, on a ring around it and far away.

    python demos/toy_heatmaps.py [OUTDIR]
"""

import os
import sys

from bnnood import data, grid, inference as inf, likelihoods as lk, metrics
from bnnood.models import expand_none_class, init_mlp, predict

out_dir = sys.argv[1] if len(sys.argv) > 1 else "toy_heatmaps"
os.makedirs(out_dir, exist_ok=True)

D = data.gen_toy_gaussians()
D_out = data.gen_uniform_ood(-6, 6, 2, 400, seed=1)
val = data.gen_toy_gaussians(data.ToyGaussians(n_per_class=50, seed=7))
ring = data.gen_ring(8, 12, 1000, seed=3)
far = data.gen_ring(100, 100, 1000, seed=4)
cfg = inf.TrainConfig(epochs=200, batch_size=64, lr=1e-2)

print(f"{'model':8s} {'acc':>6s} {'near':>6s} {'ring':>6s} {'far':>6s}")
for variant in ("cat", "oe", "nc", "sl", "ml"):
    spec = lk.LikelihoodSpec(variant)
    model = init_mlp([2, 32, 32, 4], "relu", seed=0)
    if variant == "nc":
        model = expand_none_class(model, seed=1)
    model, _ = inf.train_map(model, spec, D, D_out if spec.uses_ood else None, cfg)
    post = None
    if spec.uses_ood:
        post = inf.fit_laplace(model, spec, D, D_out, inf.LaplaceConfig(), val)
    name = "MAP" if post is None else f"LA-{variant.upper()}"
    nc = 4 if variant == "nc" else None

    xs, ys, conf = grid.confidence_grid(model, post, (-10, 10, -10, 10), 100, nc)
    grid.write_pgm(os.path.join(out_dir, f"{name}.pgm"), conf)

    mmc = [metrics.mmc(predict(model, post, S.X), nc) for S in (D, ring, far)]
    acc = metrics.accuracy(predict(model, post, D.X), D.y, nc)
    print(f"{name:8s} {acc:6.3f} " + " ".join(f"{v:6.3f}" for v in mmc))

print(f"heatmaps in {out_dir}/ (white = confident)")
