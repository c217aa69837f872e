"""Three-way flow classification from header-only features.

Each of bytes, packets and bytes/packet casts a vote against fixed range
boundaries (:class:`~smtpflow.model.Thresholds`). The flow's class is the
majority vote; with no majority the bytes vote decides, since flow size
separates the classes most sharply.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import EmptySample, InsufficientClassSamples
from .model import FlowClass, FlowRecord, Thresholds

FAILED, REJECTED, ACCEPTED = (int(c) for c in FlowClass)


class Feature(enum.Enum):
    BYTES = "bytes"
    PACKETS = "packets"
    BPP = "bpp"


@dataclass(frozen=True)
class FeatureVote:
    feature: Feature
    vote: FlowClass


def classify_feature(flow: FlowRecord, feature: Feature, t: Thresholds = Thresholds()) -> FlowClass:
    if feature is Feature.BYTES:
        v = flow.bytes
        if v < t.byte_lo:
            return FlowClass.FAILED
        return FlowClass.REJECTED if v < t.byte_hi else FlowClass.ACCEPTED
    if feature is Feature.PACKETS:
        v = flow.packets
        if v < t.pkt_lo:
            return FlowClass.FAILED
        return FlowClass.REJECTED if v <= t.pkt_hi else FlowClass.ACCEPTED
    # failed and rejected flows share the low bytes/packet range
    if flow.bytes / flow.packets < t.bpp_bound:
        return FlowClass.REJECTED
    return FlowClass.ACCEPTED


def classify(flow: FlowRecord, t: Thresholds = Thresholds()) -> tuple[FlowClass, list[FeatureVote]]:
    """Classify one flow, returning the decision and the three feature votes."""
    votes = [FeatureVote(f, classify_feature(flow, f, t)) for f in Feature]
    by_bytes, by_packets, by_bpp = (v.vote for v in votes)
    decision = by_packets if by_packets == by_bpp else by_bytes
    return decision, votes


# -- vectorised path ------------------------------------------------------

def flow_features(flows) -> np.ndarray:
    """Feature matrix with columns ``[bytes, packets]``."""
    flows = list(flows)
    out = np.empty((len(flows), 2), dtype=np.int64)
    for i, f in enumerate(flows):
        out[i, 0] = f.bytes
        out[i, 1] = f.packets
    return out


def check_features(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_min_samples=0)
    if X.shape[1] != 2:
        raise ValueError(f"expected columns [bytes, packets], got {X.shape[1]} columns")
    if len(X) and (X[:, 1].min() < 1 or (X[:, 0] < X[:, 1]).any()):
        raise ValueError("every row needs packets >= 1 and bytes >= packets")
    return X


def feature_votes(X, t: Thresholds = Thresholds()) -> np.ndarray:
    """Votes per row as an ``(n, 3)`` int array in bytes, packets, bpp order."""
    X = np.asarray(X, dtype=np.float64)
    nbytes, npkts = X[:, 0], X[:, 1]
    votes = np.empty((len(X), 3), dtype=np.int8)
    votes[:, 0] = np.where(nbytes < t.byte_lo, FAILED,
                           np.where(nbytes < t.byte_hi, REJECTED, ACCEPTED))
    votes[:, 1] = np.where(npkts < t.pkt_lo, FAILED,
                           np.where(npkts <= t.pkt_hi, REJECTED, ACCEPTED))
    votes[:, 2] = np.where(nbytes / npkts < t.bpp_bound, REJECTED, ACCEPTED)
    return votes


def combine_votes(votes: np.ndarray) -> np.ndarray:
    # packets and bpp agreeing is a majority; otherwise bytes sides with one
    # of them or all three differ, and bytes decides either way
    return np.where(votes[:, 1] == votes[:, 2], votes[:, 1], votes[:, 0])


# -- empirical CDFs -------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalCdf:
    values: np.ndarray

    @property
    def n(self):
        return len(self.values)

    def fraction_below(self, x):
        return fraction_below(self, x)

    def quantile(self, q):
        return float(np.quantile(self.values, q))

    def points(self):
        """``(value, fraction <= value)`` at every distinct sample value."""
        uniq, counts = np.unique(self.values, return_counts=True)
        return uniq, np.cumsum(counts) / self.n


def compute_cdf(values) -> EmpiricalCdf:
    arr = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if arr.size == 0:
        raise EmptySample("cannot build a CDF from no samples")
    arr.setflags(write=False)
    return EmpiricalCdf(arr)


def fraction_below(cdf: EmpiricalCdf, x) -> float:
    """Share of samples strictly less than ``x``."""
    return int(np.searchsorted(cdf.values, x, side="left")) / cdf.n


# -- calibration ----------------------------------------------------------

def best_split(lower, upper) -> int:
    """Smallest integer ``t`` minimising ``#(lower >= t) + #(upper < t)``."""
    lower = np.sort(np.asarray(lower, dtype=np.float64))
    upper = np.sort(np.asarray(upper, dtype=np.float64))
    both = np.concatenate([lower, upper])
    # every distinct cost is attained at one of these; floor(min) stands in
    # for all t below the data
    candidates = np.unique(np.concatenate([np.ceil(both), np.floor(both) + 1,
                                           [np.floor(both.min())]]))
    cost = (len(lower) - np.searchsorted(lower, candidates, side="left")
            + np.searchsorted(upper, candidates, side="left"))
    return int(candidates[np.argmin(cost)])


def calibrate_arrays(X, y, min_class_samples=100) -> Thresholds:
    X = check_features(X)
    y = np.asarray(y, dtype=np.int64)
    by_class = {}
    for cls in FlowClass:
        rows = X[y == int(cls)]
        if len(rows) < min_class_samples:
            raise InsufficientClassSamples(cls, len(rows), min_class_samples)
        by_class[cls] = rows
    f, r, a = (by_class[c] for c in FlowClass)
    return Thresholds(
        byte_lo=best_split(f[:, 0], r[:, 0]),
        byte_hi=best_split(r[:, 0], a[:, 0]),
        pkt_lo=best_split(f[:, 1], r[:, 1]),
        # rejected owns pkt_hi itself, so the split point is pkt_hi + 1
        pkt_hi=best_split(r[:, 1], a[:, 1]) - 1,
        bpp_bound=best_split(r[:, 0] / r[:, 1], a[:, 0] / a[:, 1]),
    )


def calibrate(labeled, min_class_samples=100) -> Thresholds:
    """Fit thresholds to ground-truth labeled flows by per-feature grid search."""
    labeled = list(labeled)
    X = flow_features(lf.flow for lf in labeled)
    y = np.array([int(lf.label) for lf in labeled], dtype=np.int64)
    return calibrate_arrays(X, y, min_class_samples)


class FlowClassifier(ClassifierMixin, BaseEstimator):
    """Threshold classifier over ``[bytes, packets]`` feature rows.

    With ``fit_thresholds=True`` and labels given, :meth:`fit` calibrates the
    boundaries from data; otherwise the constructor values are used as-is.
    The fitted boundaries live in ``thresholds_``.

    >>> clf = FlowClassifier(fit_thresholds=False).fit([[250, 3]])
    >>> clf.predict([[250, 3], [600, 7], [5000, 15]]).tolist()
    [0, 1, 2]
    """

    def __init__(self, byte_lo=300, byte_hi=1500, pkt_lo=5, pkt_hi=10, bpp_bound=100,
                 fit_thresholds=True, min_class_samples=100):
        self.byte_lo = byte_lo
        self.byte_hi = byte_hi
        self.pkt_lo = pkt_lo
        self.pkt_hi = pkt_hi
        self.bpp_bound = bpp_bound
        self.fit_thresholds = fit_thresholds
        self.min_class_samples = min_class_samples

    def fit(self, X, y=None):
        X = check_features(X)
        if self.fit_thresholds and y is not None:
            self.thresholds_ = calibrate_arrays(X, y, self.min_class_samples)
        else:
            self.thresholds_ = Thresholds(self.byte_lo, self.byte_hi, self.pkt_lo,
                                          self.pkt_hi, self.bpp_bound)
        self.classes_ = np.array([int(c) for c in FlowClass])
        self.n_features_in_ = 2
        return self

    def votes(self, X):
        check_is_fitted(self, "thresholds_")
        return feature_votes(check_features(X), self.thresholds_)

    def predict(self, X):
        return combine_votes(self.votes(X)).astype(np.int64)
