"""Calibration, sharpness and reliability on forecasts with known behaviour.

Draws outcomes from the forecasts themselves, which should score near zero,
then from forecasts that are too confident and too timid. The reliability
curve shows which way each one is off.
"""

import numpy as np

from densreg import numerics as nx
from densreg.metrics import ForecastSet, calibration_score, reliability_curve, sharpness
from densreg.regressor import PredictiveGaussian

rng = nx.make_rng(1)
n = 5000
mean = rng.normal(size=n) * 2
var = rng.uniform(0.5, 2.0, n)
truth = PredictiveGaussian(mean, var)
y = truth.sample(rng)

cases = {
    "honest": truth,
    "overconfident (var / 4)": PredictiveGaussian(mean, var / 4),
    "underconfident (var * 4)": PredictiveGaussian(mean, var * 4),
}
for name, pred in cases.items():
    fs = ForecastSet(pred, y)
    print(f"{name:26s} cal {calibration_score(fs):.4f}   sharpness {sharpness(fs):.3f}")

print("\nreliability, overconfident forecasts (observed fraction vs nominal level):")
for p, frac in reliability_curve(ForecastSet(cases["overconfident (var / 4)"], y))[::4]:
    print(f"  {p:.3f} -> {frac:.3f}")
