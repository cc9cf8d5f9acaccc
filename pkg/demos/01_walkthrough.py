"""Fit, predict and attach MSE estimates on one contaminated data set.

Run with ``python demos/01_walkthrough.py``. Takes a few seconds.
"""
import numpy as np

from robustsae import Scenario, fit_dpd, fit_ml, generate_scenario, mse_bootstrap, predict, select_alpha

# 30 areas, 10% of random effects drawn from a wide N(0, 36) component
data, theta = generate_scenario(Scenario("III"), replicate=0, seed=11)

ml = fit_ml(data)
print(f"ML:   beta = {np.round(ml.params.beta, 3)}, A = {ml.params.a:.3f}")

# alpha chosen so the robust predictor costs at most 5% extra MSE under the model
alpha = select_alpha(data, 5.0, a_hat=ml.params.a)
dpd = fit_dpd(data, alpha, config=ml.config)
print(f"DPD:  alpha = {alpha:.3f}, beta = {np.round(dpd.params.beta, 3)}, A = {dpd.params.a:.3f}")

eb = predict(data, ml.params, "eb")
rb = predict(data, dpd.params, "dpeb", alpha=alpha)
geb = predict(data, ml.params, "geb")
for name, p in (("EB", eb), ("DPEB", rb), ("GEB", geb)):
    print(f"{name:5s} mean squared error vs truth: {np.mean((p.theta_hat - theta) ** 2):.3f}")

# areas with the smallest shrinkage are the ones the DPD weight treats as outlying
worst = np.argsort(rb.shrink_weight)[:3]
print("least shrunk areas:", worst.tolist(), "weights", np.round(rb.shrink_weight[worst], 4).tolist())

rep = mse_bootstrap(data, dpd, alpha, b=200, seed=3)
print("bootstrap MSE, first five areas:", np.round(rep.bootstrap[:5], 3).tolist())
