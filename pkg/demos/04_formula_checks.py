"""Monte Carlo check of the exact and second-order MSE formulas.

Compares ``g1 + g2`` with simulated MSE at known parameters, then the full
second-order expression with the MSE of the fully estimated predictor.
"""
import numpy as np

from robustsae import Dataset, ModelParams, Scenario, fit_many, g1, g2, mse_components, mse_plugin
from robustsae.simulation import generate_batch

rng = np.random.default_rng(0)
a, d, n = 0.5, 0.5, 10**6
for alpha in (0.1, 0.3, 0.5):
    theta = np.sqrt(a) * rng.standard_normal(n)
    y = theta + np.sqrt(d) * rng.standard_normal(n)
    s = (2 * np.pi * (a + d)) ** (-alpha / 2) * np.exp(-alpha * y**2 / (2 * (a + d)))
    err = (y - d / (a + d) * y * s - theta) ** 2
    print(f"alpha={alpha}: simulated {err.mean():.4f} +- {err.std() / np.sqrt(n):.4f}, exact {g1(a, d) + g2(a, d, alpha):.4f}")

s = Scenario("I", m=100)
alpha = 0.3
y, theta = generate_batch(s, range(4000), 1)
fit = fit_many(y, s.x, s.d, alpha)
b = fit.a[:, None] + s.d
u = y - fit.beta @ s.x.T
est = y - s.d / b * u * (2 * np.pi * b) ** (-alpha / 2) * np.exp(-alpha * u * u / (2 * b))
b_a = s.m * np.mean(fit.a - s.a)
formula = mse_plugin(mse_components(Dataset(y[0], s.x, s.d), ModelParams(np.array(s.beta), s.a), alpha, b_a=b_a), s.m)
sim = ((est - theta) ** 2).mean(axis=0)
for g in range(1, 6):
    sel = s.groups == g
    print(f"group {g}: simulated {sim[sel].mean():.4f}, second-order formula {formula[sel].mean():.4f}")
