"""The detection and calibration metrics on small hand-made inputs.

    python demos/metrics_walkthrough.py
"""

import numpy as np

from bnnood import metrics

# a confident, mostly right classifier
probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
labels = np.array([0, 0, 1, 1])
print("accuracy", metrics.accuracy(probs, labels))
print("ece     ", metrics.ece(probs, labels))
print("brier   ", metrics.brier(probs, labels))

# detection scores: higher means "looks in-distribution"
s_in = np.array([0.95, 0.9, 0.85, 0.7, 0.6])
s_out = np.array([0.8, 0.5, 0.5, 0.4])
print("fpr95   ", metrics.fpr95(s_in, s_out))
print("auroc   ", metrics.auroc(s_in, s_out))
print("auprc   ", metrics.auprc(s_in, s_out))

# ranking metrics ignore any strictly increasing transform of the scores
print("auroc after exp", metrics.auroc(np.exp(s_in), np.exp(s_out)))

# and swapping the roles of the two sets gives the complement
print("auroc swapped  ", metrics.auroc(s_out, s_in))

# a full report, as the CLI writes it
rep = metrics.detection_report(probs, np.full((3, 2), 0.5), dataset="demo", method="map")
print(metrics.MetricsReport.csv_header())
print(rep.csv_row())
