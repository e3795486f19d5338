"""
Reliability curves and expected calibration error
=================================================

Two simulated prediction streams: one calibrated, one overconfident.
"""

import numpy as np

from ncnn.labels import NO_PAIN, PAIN
from ncnn.metrics import PredictionRecord, calibration_curve, confidence_histogram

rng = np.random.default_rng(0)
n = 20000
truth = rng.uniform(size=n)
labels = np.where(rng.uniform(size=n) < truth, PAIN, NO_PAIN)

calibrated = [PredictionRecord(float(c), y) for c, y in zip(truth, labels)]
# push every confidence towards the nearest extreme
sharpened = truth ** 3 / (truth ** 3 + (1 - truth) ** 3)
overconfident = [PredictionRecord(float(c), y) for c, y in zip(sharpened, labels)]

for name, records in (("calibrated", calibrated), ("overconfident", overconfident)):
    report = calibration_curve(records)
    print(f"{name}: ECE = {report.ece:.4f}")
    for conf, freq, count in report.curve():
        bar = "#" * int(40 * freq)
        print(f"  conf {conf:.2f}  freq {freq:.2f}  n={count:5d}  {bar}")
    print("  histogram:", confidence_histogram(records))
