"""Calibration and OOD-detection metrics.

Sums that feed a metric use ``math.fsum`` and all counting is done in
integers, so each result is independent of summation order and can be
compared for exact equality against a brute-force reference.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError


def _probs(probs, n_classes=None):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise UsageError("predictive probabilities must be a matrix")
    return p if n_classes is None else p[:, :n_classes]


def confidence(probs, n_classes=None):
    """Max probability per row; with ``n_classes`` only the first ``n_classes`` entries count.

    Restricting the columns is how a none-class model is scored: the extra
    class is excluded from the confidence.
    """
    return _probs(probs, n_classes).max(axis=1)


def predictions(probs, n_classes=None):
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return _probs(probs, n_classes).argmax(axis=1)


def _labels(labels, m):
    if labels is None:
        raise UsageError("this metric needs labels")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (m,):
        raise UsageError("need one label per prediction row")
    return y


def accuracy(probs, labels, n_classes=None):
    p = _probs(probs, n_classes)
    y = _labels(labels, p.shape[0])
    if p.shape[0] == 0:
        raise UsageError("accuracy of an empty set")
    return int(np.sum(p.argmax(axis=1) == y)) / p.shape[0]


def ece_bins(probs, labels, n_bins=15, n_classes=None):
    """Per-bin ``(count, accuracy, mean confidence)`` over equal-width bins on (0, 1].

    Bins are left-open and right-closed; a confidence of exactly 0 joins the
    first bin. Empty bins report ``(0, nan, nan)``.
    """
    p = _probs(probs, n_classes)
    y = _labels(labels, p.shape[0])
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    # edge b is the correctly rounded b / n_bins
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        mask = idx == b
        n = int(mask.sum())
        if n == 0:
            out.append((0, math.nan, math.nan))
        else:
            out.append((n, math.fsum(correct[mask]) / n, math.fsum(conf[mask]) / n))
    return out


def ece(probs, labels, n_bins=15, n_classes=None):
    """Expected calibration error: count-weighted mean of |accuracy - confidence| per bin."""
    m = np.asarray(probs).shape[0]
    if m == 0:
        raise UsageError("ECE of an empty set")
    bins = ece_bins(probs, labels, n_bins, n_classes)
    return math.fsum(n / m * abs(acc - conf) for n, acc, conf in bins if n)


def brier(probs, labels):
    """Mean over rows of the squared distance to the one-hot label."""
    p = _probs(probs)
    y = _labels(labels, p.shape[0])
    if p.shape[0] == 0:
        raise UsageError("Brier score of an empty set")
    d = p.copy()
    d[np.arange(len(y)), y] -= 1.0
    return math.fsum((d * d).ravel()) / p.shape[0]


def mmc(probs, n_classes=None):
    """Mean maximum confidence."""
    conf = confidence(probs, n_classes)
    if conf.size == 0:
        raise UsageError("MMC of an empty set")
    return math.fsum(conf) / conf.size


def _scores(in_scores, out_scores):
    s_in = np.asarray(in_scores, dtype=np.float64).ravel()
    s_out = np.asarray(out_scores, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise UsageError("need at least one in- and one out-of-distribution score")
    return s_in, s_out


def fpr_at_tpr(in_scores, out_scores, tpr=0.95):
    """Fraction of OOD scores at or above the largest threshold keeping ``tpr`` of in-scores.

    In-distribution is the positive class; higher scores mean more
    in-distribution. Candidate thresholds are the observed in-scores and -inf.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    # ">= tpr" in exact integer arithmetic for the common 0.95 case
    num, den = (19, 20) if tpr == 0.95 else (tpr, 1.0)
    uniq = np.unique(s_in)[::-1]
    kept = np.searchsorted(np.sort(s_in), uniq, side="left")
    kept = s_in.size - kept  # number of in-scores >= each candidate
    ok = kept * den >= num * s_in.size
    t = uniq[np.argmax(ok)] if ok.any() else -np.inf
    return int(np.sum(s_out >= t)) / s_out.size


def fpr95(in_scores, out_scores):
    return fpr_at_tpr(in_scores, out_scores, 0.95)


def _ratio_half(num, den):
    # num/den for num in [0, den]; values above 1/2 are formed as 1 - (den-num)/den
    # so that auroc(a, b) + auroc(b, a) rounds to exactly 1
    if 2 * num <= den:
        return num / den
    return 1.0 - (den - num) / den


def auroc_from_counts(n_greater, n_ties, n_in, n_out):
    return _ratio_half(2 * n_greater + n_ties, 2 * n_in * n_out)


def auroc(in_scores, out_scores):
    """Probability that an in-score beats an out-score, ties counting one half."""
    s_in, s_out = _scores(in_scores, out_scores)
    srt = np.sort(s_out)
    lo = np.searchsorted(srt, s_in, side="left")
    hi = np.searchsorted(srt, s_in, side="right")
    return auroc_from_counts(int(lo.sum()), int((hi - lo).sum()), s_in.size, s_out.size)


def auprc(in_scores, out_scores):
    """Average precision with in-distribution as the positive class.

    Scores are walked from high to low; tied scores form one group whose
    precision is taken after the whole group is admitted.
    """
    s_in, s_out = _scores(in_scores, out_scores)
    scores = np.concatenate([s_in, s_out])
    pos = np.concatenate([np.ones(s_in.size, np.int64), np.zeros(s_out.size, np.int64)])
    uniq, inv = np.unique(-scores, return_inverse=True)
    pos_per = np.bincount(inv, weights=pos, minlength=uniq.size).astype(np.int64)
    all_per = np.bincount(inv, minlength=uniq.size).astype(np.int64)
    tp = np.cumsum(pos_per)
    seen = np.cumsum(all_per)
    terms = [int(n) * (int(t) / int(s)) for n, t, s in zip(pos_per, tp, seen) if n]
    return math.fsum(terms) / s_in.size


@dataclass
class MetricsReport:
    dataset: str = ""
    method: str = ""
    likelihood: str = ""
    accuracy: float = math.nan
    ece: float = math.nan
    brier: float = math.nan
    mmc_in: float = math.nan
    mmc_out: float = math.nan
    fpr95: float = math.nan
    auroc: float = math.nan
    auprc: float = math.nan

    FIELDS = ("dataset", "method", "likelihood", "accuracy", "ece", "brier",
              "mmc_in", "mmc_out", "fpr95", "auroc", "auprc")

    @classmethod
    def csv_header(cls):
        return ",".join(cls.FIELDS)

    def csv_row(self):
        """One CSV line without terminator; NaN becomes an empty cell, text is quoted if needed."""
        d = asdict(self)
        cells = []
        for k in self.FIELDS:
            v = d[k]
            cells.append(v if isinstance(v, str) else ("" if math.isnan(v) else repr(float(v))))
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(cells)
        return buf.getvalue()


def evaluate(probs, labels=None, n_classes=None, dataset="", method="", likelihood=""):
    """Accuracy, ECE and Brier for one labeled predictive matrix."""
    report = MetricsReport(dataset, method, likelihood)
    report.accuracy = accuracy(probs, labels, n_classes)
    report.ece = ece(probs, labels, 15, n_classes)
    report.brier = brier(probs, labels)
    report.mmc_in = mmc(probs, n_classes)
    return report


def detection_report(probs_in, probs_out, n_classes=None, dataset="", method="", likelihood=""):
    """FPR95, AUROC, AUPRC and both MMCs from max-confidence scores."""
    s_in = confidence(probs_in, n_classes)
    s_out = confidence(probs_out, n_classes)
    report = MetricsReport(dataset, method, likelihood)
    report.mmc_in = mmc(probs_in, n_classes)
    report.mmc_out = mmc(probs_out, n_classes)
    report.fpr95 = fpr95(s_in, s_out)
    report.auroc = auroc(s_in, s_out)
    report.auprc = auprc(s_in, s_out)
    return report
