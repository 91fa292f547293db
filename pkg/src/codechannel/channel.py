"""Joint encoder/decoder label tables, the row-normalized coupled channel,
summary reports, analytic stress-test tables, and the lagged interference
statistic for label sequences.

Labels are 1-based integers in {1..K} throughout the public API.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .validation import check_count, check_prob_vector

_MASS_ATOL = 1e-12

# Above this size the exhaustive permutation search for the matched score is
# replaced by an assignment-problem solver.
_EXHAUSTIVE_K = 8


@dataclass(frozen=True)
class JointCodeTable:
    """K x K joint probability table over paired (encoder, decoder) labels.

    ``sample_count`` is 0 for analytic tables and the number of observed
    pairs for empirical ones.
    """

    cells: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise ValueError(f"cells must be square, got shape {cells.shape}")
        if cells.shape[0] < 1:
            raise ValueError("need K >= 1")
        if np.any(cells < 0):
            raise ValueError("cells must be non-negative")
        total = math.fsum(cells.ravel().tolist())
        if abs(total - 1.0) > _MASS_ATOL:
            raise ValueError(f"cells must sum to 1, got {total!r}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def K(self) -> int:
        return self.cells.shape[0]

    def row_marginal(self) -> np.ndarray:
        return self.cells.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.cells.sum(axis=0)

    def agreement(self) -> float:
        # normalized by the realized total so analytic tables built from
        # non-representable weights (e.g. 1/6) still report exactly 1 or 0
        return math.fsum(np.diag(self.cells).tolist()) / math.fsum(self.cells.ravel().tolist())

    def to_csv(self, path) -> None:
        """K header columns then K data rows; loadable by from_csv."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"dec_{j}" for j in range(1, self.K + 1)])
            for row in self.cells:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, sample_count: int = 0) -> "JointCodeTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        cells = np.array([[float(v) for v in row] for row in rows[1:]])
        return cls(cells, sample_count)


def table_from_pairs(pairs, K: int) -> JointCodeTable:
    """Normalized contingency table from observed (enc, dec) label pairs."""
    K = check_count(K, "K")
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size == 0:
        raise ValueError("need at least one label pair")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError(f"pairs must have shape (T, 2), got {pairs.shape}")
    if pairs.min() < 1 or pairs.max() > K:
        raise ValueError(f"labels must lie in 1..{K}")
    counts = np.zeros((K, K))
    np.add.at(counts, (pairs[:, 0] - 1, pairs[:, 1] - 1), 1.0)
    return JointCodeTable(counts / len(pairs), sample_count=len(pairs))


def _entropy(p: np.ndarray) -> float:
    # fsum makes the value independent of summation order, so relabeled
    # tables report bit-identical entropies.
    return -math.fsum(v * math.log(v) for v in p.tolist() if v > 0.0)


def _mutual_information(cells: np.ndarray) -> float:
    rows = cells.sum(axis=1)
    cols = cells.sum(axis=0)
    terms = []
    K = cells.shape[0]
    for i in range(K):
        for j in range(K):
            v = cells[i, j]
            if v > 0.0:
                terms.append(v * (math.log(v) - math.log(rows[i]) - math.log(cols[j])))
    mi = math.fsum(terms)
    return 0.0 if -1e-12 < mi < 0.0 else mi


def _matched_agreement(cells: np.ndarray) -> tuple[float, tuple[int, ...]]:
    K = cells.shape[0]
    if K <= _EXHAUSTIVE_K:
        best, perm = -1.0, None
        for cand in itertools.permutations(range(K)):
            score = sum(cells[i, cand[i]] for i in range(K))
            if score > best:
                best, perm = score, cand
    else:
        rows, cols = linear_sum_assignment(cells, maximize=True)
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
    score = math.fsum(cells[i, perm[i]] for i in range(K))
    total = math.fsum(cells.ravel().tolist())
    return score / total, tuple(p + 1 for p in perm)


@dataclass(frozen=True)
class ChannelReport:
    """Full reporting unit for one joint code table."""

    K: int
    agreement: float
    interference: float
    matched_agreement: float
    matching_permutation: tuple[int, ...]
    r_eff: float
    r_eff_normalized: float
    h_enc: float
    h_dec: float
    active_enc: int
    active_dec: int
    activity_threshold: float
    row_entropies: np.ndarray = field(repr=False)
    column_concentrations: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "A": self.agreement,
            "A_matched": self.matched_agreement,
            "perm": list(self.matching_permutation),
            "R_eff": self.r_eff,
            "R_eff_norm": self.r_eff_normalized,
            "H_enc": self.h_enc,
            "H_dec": self.h_dec,
            "active_enc": self.active_enc,
            "active_dec": self.active_dec,
            "interference": self.interference,
            "activity_threshold": self.activity_threshold,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def summarize(table: JointCodeTable, activity_threshold: float = 1e-6) -> ChannelReport:
    """Compute the reporting unit: agreement, matched agreement, effective
    rate, marginal entropies, active counts, and per-row/column profiles.

    Raw and permutation-matched agreement are both reported; a matched score
    alone can hide a relabeled channel.
    """
    cells = table.cells
    K = table.K
    rows = table.row_marginal()
    cols = table.col_marginal()

    agreement = table.agreement()
    matched, perm = _matched_agreement(cells)
    r_eff = _mutual_information(cells)
    h_enc = _entropy(rows)
    h_dec = _entropy(cols)

    channel, _ = row_normalize(table)
    row_entropies = np.array([_entropy(channel[i]) for i in range(K)])

    return ChannelReport(
        K=K,
        agreement=agreement,
        interference=1.0 - agreement,
        matched_agreement=matched,
        matching_permutation=perm,
        r_eff=r_eff,
        r_eff_normalized=r_eff / math.log(K) if K > 1 else 0.0,
        h_enc=h_enc,
        h_dec=h_dec,
        active_enc=int((rows > activity_threshold).sum()),
        active_dec=int((cols > activity_threshold).sum()),
        activity_threshold=activity_threshold,
        row_entropies=row_entropies,
        column_concentrations=cols.copy(),
    )


def row_normalize(table: JointCodeTable) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized channel matrix and a flag per zero-mass row.

    Zero-mass rows are emitted as uniform rows (flagged True) so downstream
    consumers never see NaNs.
    """
    cells = table.cells
    rows = table.row_marginal()
    flags = rows <= 0.0
    safe = np.where(flags, 1.0, rows)
    channel = cells / safe[:, None]
    channel[flags] = 1.0 / table.K
    return channel, flags


def _check_derangement(perm: np.ndarray, K: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(1, K + 1)):
        raise ValueError(f"perm must be a permutation of 1..{K}")
    if np.any(perm == np.arange(1, K + 1)):
        raise ValueError("perm must be a derangement (no fixed points)")
    return perm


def cyclic_derangement(K: int) -> np.ndarray:
    """The shift i -> i+1 (mod K), a derangement for every K >= 2."""
    if K < 2:
        raise ValueError("no derangement exists for K < 2")
    return np.roll(np.arange(1, K + 1), -1)


def stress_table(kind: str, K: int, perm=None, weights=None) -> JointCodeTable:
    """Analytic tables realizing the marginal-vs-coupled separations.

    Kinds: ``identity``, ``derangement``, ``many_to_one``, ``collapse``,
    ``weighted_identity``, ``weighted_permutation``. Permutation kinds take
    ``perm`` (1-based, derangement required for ``derangement``); weighted
    kinds take a probability vector ``weights``.
    """
    K = check_count(K, "K")
    cells = np.zeros((K, K))
    if kind == "identity":
        np.fill_diagonal(cells, 1.0 / K)
    elif kind == "derangement":
        perm = cyclic_derangement(K) if perm is None else _check_derangement(perm, K)
        cells[np.arange(K), perm - 1] = 1.0 / K
    elif kind == "many_to_one":
        cells[:, 0] = 1.0 / K
    elif kind == "collapse":
        cells[0, 0] = 1.0
    elif kind == "weighted_identity":
        w = check_prob_vector(weights, "weights")
        if len(w) != K:
            raise ValueError("weights must have length K")
        cells[np.arange(K), np.arange(K)] = w
    elif kind == "weighted_permutation":
        w = check_prob_vector(weights, "weights")
        if len(w) != K:
            raise ValueError("weights must have length K")
        perm = cyclic_derangement(K) if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(1, K + 1)):
            raise ValueError(f"perm must be a permutation of 1..{K}")
        cells[np.arange(K), perm - 1] = w
    else:
        raise ValueError(f"unknown stress kind {kind!r}")
    return JointCodeTable(cells, sample_count=0)


def lagged_interference(seq, lag: int, K: int) -> float:
    """Plug-in conditional mutual information I(enc[t-lag]; dec[t] | enc[t]).

    ``seq`` is an ordered (T, 2) array of (enc, dec) label pairs. Positive
    values mean past encoder codes still inform the current decoder reading
    after conditioning on the current encoder code.
    """
    K = check_count(K, "K")
    lag = check_count(lag, "lag")
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 2 or seq.shape[1] != 2:
        raise ValueError(f"seq must have shape (T, 2), got {seq.shape}")
    T = seq.shape[0]
    if T <= lag:
        raise ValueError(f"sequence length {T} must exceed lag {lag}")
    if seq.min() < 1 or seq.max() > K:
        raise ValueError(f"labels must lie in 1..{K}")

    a = seq[: T - lag, 0]  # enc at t - lag
    b = seq[lag:, 1]  # dec at t
    c = seq[lag:, 0]  # enc at t
    counts = np.zeros((K, K, K))
    np.add.at(counts, (a - 1, b - 1, c - 1), 1.0)
    p = counts / (T - lag)

    p_c = p.sum(axis=(0, 1))
    p_ac = p.sum(axis=1)
    p_bc = p.sum(axis=0)
    terms = []
    for i, j, k in zip(*np.nonzero(p)):
        terms.append(
            p[i, j, k]
            * (
                math.log(p[i, j, k])
                + math.log(p_c[k])
                - math.log(p_ac[i, k])
                - math.log(p_bc[j, k])
            )
        )
    cmi = math.fsum(terms)
    return 0.0 if -1e-12 < cmi < 0.0 else cmi
