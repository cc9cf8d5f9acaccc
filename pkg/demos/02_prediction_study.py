"""Reproduce the group-averaged prediction MSE table for the five scenarios.

``python demos/02_prediction_study.py [replicates]``; 1000 replicates take
under half a minute on one core.
"""
import sys

from robustsae import Scenario, run_prediction_study

r = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
for tag in ("I", "II", "III", "IV", "V"):
    rep = run_prediction_study(Scenario(tag), r=r, seed=2017)
    print(f"\nscenario {tag}")
    print(rep.table())
