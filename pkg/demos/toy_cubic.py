"""Cubic toy: the predictive band widens as inputs leave the training range.

Trains Density-Regression on y = x^3 + noise with x drawn from [-4, 4], then
prints the predictive standard deviation along a grid that runs out to
|x| = 7. Inside the training range the band tracks the noise level; outside,
the feature density drops and the variance grows with it.

    python demos/toy_cubic.py
"""

import numpy as np

from densreg.data import generate_cubic_toy
from densreg.training import TrainConfig, run_pipeline

split = generate_cubic_toy(seed=0)
print(f"train: {len(split.train)} points with |x| <= 4, noise std 3")

# The toy uses a kernel density on the learned features; see README for why.
config = TrainConfig(density="kde", kde_bandwidth_scale=0.5)
model = run_pipeline(split.train, config)
plain = model.predict(split.iid_test.X, plain=True)
dens = model.predict(split.iid_test.X)
print(f"IID mean std, stage-1 head: {plain.std.mean():.2f}; density head: {dens.std.mean():.2f}")

grid = np.linspace(-7, 7, 15).reshape(-1, 1)
pred = model.predict(grid)
print("\n     x    mean     std")
for x, mu, sd in zip(grid[:, 0], pred.mean, pred.std):
    marker = "  <- outside training range" if abs(x) > 4 else ""
    print(f"{x:6.1f} {mu:7.1f} {sd:7.2f}{marker}")

inside = model.predict(np.linspace(-4, 4, 201).reshape(-1, 1)).std.mean()
outside = model.predict(np.concatenate([np.linspace(-7, -5, 50), np.linspace(5, 7, 50)]).reshape(-1, 1)).std.mean()
print(f"\nmean std for |x| in [5, 7] is {outside / inside:.1f}x the mean std for |x| <= 4")

# The same run through the command line writes plot data and metrics:
#   densreg toy --outdir runs
