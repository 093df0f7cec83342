"""How the density enters the head.

The head emits two numbers per input, s and m. The predictive mean does not
depend on the density at all, and the variance is inversely proportional to
it. This script checks both facts on random values and shows the variance
sweeping twenty-four orders of magnitude as the density does.
"""

import numpy as np

from densreg import numerics as nx
from densreg.numerics import Tensor
from densreg.regressor import log_std_and_mean, closed_form_moments

rng = nx.make_rng(0)
s = Tensor(rng.normal(size=(6, 1)))
m = Tensor(rng.normal(size=(6, 1)))
log_p = rng.uniform(-10, 10, size=(6, 1))

ls0, mu0 = log_std_and_mean(s, m)
ls1, mu1 = log_std_and_mean(s, m, log_p)
var0, var1 = np.exp(ls0.data) ** 2, np.exp(ls1.data) ** 2

print("mean without density - mean with density:", np.abs(mu0.data - mu1.data).max())
print("var with density * p / var without density:", (var1 * np.exp(log_p) / var0).ravel())

mu_t, var_t = closed_form_moments(s.data[:, 0], m.data[:, 0], log_p[:, 0])
print("closed form, largest relative gap:", np.max(np.abs(var_t - var1[:, 0]) / var_t))

# a single head swept across densities
s1, m1 = Tensor([[0.3]]), Tensor([[-0.8]])
print("\n      p        variance")
for p in 10.0 ** np.arange(-12, 13, 4):
    ls, mu = log_std_and_mean(s1, m1, np.array([[np.log(p)]]))
    print(f"{p:8.0e}   {np.exp(ls.item()) ** 2:.3e}")
