"""Relative bias and CV (percent) of the naive, plug-in and bootstrap MSE estimators.

Scenario I with 20 areas. ``python demos/03_mse_estimators.py [outer]``; the
default 300 outer replicates with 500 bootstrap draws each take about 30 s.
"""
import sys

from robustsae import Scenario, run_mse_estimator_study

outer = int(sys.argv[1]) if len(sys.argv) > 1 else 300
rep = run_mse_estimator_study(Scenario("I", m=20), outer=outer, truth_r=2000, seed=2017, b=500)
print(rep.table(("RB", "CV")))
