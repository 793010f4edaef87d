"""OSCR curves, CCR at a target FPR, closed-set recall@k, entropy histograms."""
import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import entropy_rows


class MetricsError(ValueError):
    pass


class _Unreachable:
    """Sentinel for an operating point the curve never reaches."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "Unreachable"

    def __str__(self):
        return "---"

    def __bool__(self):
        return False


Unreachable = _Unreachable()


@dataclass(frozen=True)
class ScoredExample:
    true_class: Optional[int]  # None for an unknown-origin example
    predicted_class: Optional[int]  # None when the model decided NOTA
    confidence: float

    @property
    def is_known(self):
        return self.true_class is not None


def split_scores(scored):
    """ScoredExamples -> (known_conf, known_correct, unknown_conf) arrays.

    A NOTA decision counts as confidence 0, below every positive threshold.
    """
    kc, ok, uc = [], [], []
    for s in scored:
        if not 0.0 <= s.confidence <= 1.0:
            raise MetricsError(f"confidence {s.confidence} outside [0, 1]")
        conf = 0.0 if s.predicted_class is None else float(s.confidence)
        if s.is_known:
            kc.append(conf)
            ok.append(s.predicted_class is not None and s.predicted_class == s.true_class)
        else:
            uc.append(conf)
    return np.array(kc, dtype=float), np.array(ok, dtype=bool), np.array(uc, dtype=float)


@dataclass
class OscrCurve:
    theta: np.ndarray
    fpr: np.ndarray
    ccr: np.ndarray
    n_known: int
    n_unknown: int

    def points(self):
        return list(zip(self.theta.tolist(), self.fpr.tolist(), self.ccr.tolist()))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "fpr", "ccr"])
        for t, f, c in self.points():
            w.writerow([repr(t), repr(f), repr(c)])
        return buf.getvalue()


def oscr_from_arrays(known_conf, known_correct, unknown_conf) -> OscrCurve:
    """FPR(t) = #{unknown: conf > t} / #unknown,
    CCR(t) = #{known: correct and conf > t} / #known,
    at t in {0, 1} and every distinct confidence."""
    kc = np.asarray(known_conf, dtype=float)
    ok = np.asarray(known_correct, dtype=bool)
    uc = np.asarray(unknown_conf, dtype=float)
    if kc.size == 0 or uc.size == 0:
        raise MetricsError("OSCR needs at least one known and one unknown example")
    theta = np.unique(np.concatenate([[0.0, 1.0], kc, uc]))
    us = np.sort(uc)
    cs = np.sort(kc[ok])
    n_fp = uc.size - np.searchsorted(us, theta, side="right")
    n_cc = cs.size - np.searchsorted(cs, theta, side="right")
    return OscrCurve(theta, n_fp / uc.size, n_cc / kc.size, int(kc.size), int(uc.size))


def oscr_curve(scored) -> OscrCurve:
    return oscr_from_arrays(*split_scores(scored))


def ccr_at_fpr(curve: OscrCurve, target_fpr):
    """CCR at the most permissive threshold whose FPR <= target.

    The reject-everything point (theta = 1) is not an operating point, so a
    scorer that saturates on unknowns can make low targets Unreachable.
    """
    usable = curve.theta < 1.0
    hit = np.flatnonzero(usable & (curve.fpr <= target_fpr + 1e-12))
    if hit.size == 0:
        return Unreachable
    return float(curve.ccr[hit[0]])


def recall_at_k(probs, true_index, k):
    """Fraction of rows whose true column is among the top ``k``.

    Ties rank the lower column first.  ``probs`` must cover exactly the
    in-scope classes (drop any background column first).
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    true_index = np.asarray(true_index)
    c = probs.shape[1]
    if not 1 <= k <= c:
        raise MetricsError(f"k={k} outside [1, {c}]")
    if probs.shape[0] == 0:
        return float("nan")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == true_index[:, None], axis=1)))


@dataclass
class EntropyHistogram:
    edges: np.ndarray
    known: np.ndarray
    unknown: np.ndarray

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "known_count", "unknown_count"])
        for i in range(self.known.size):
            w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                        int(self.known[i]), int(self.unknown[i])])
        return buf.getvalue()


def entropy_histogram(probs, is_known, n_bins=50) -> EntropyHistogram:
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    is_known = np.asarray(is_known, dtype=bool)
    hmax = np.log(probs.shape[1])
    edges = np.linspace(0.0, hmax, n_bins + 1)
    h = entropy_rows(probs)
    if hmax > 0:
        idx = np.clip(np.floor(h / hmax * n_bins).astype(np.int64), 0, n_bins - 1)
    else:
        idx = np.zeros(h.size, dtype=np.int64)
    known = np.bincount(idx[is_known], minlength=n_bins)
    unknown = np.bincount(idx[~is_known], minlength=n_bins)
    return EntropyHistogram(edges, known, unknown)


def replicate_summary(values):
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise MetricsError("no replicate values")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std
