"""Posterior-Gibbs kernels on finite grids and the one-step / H-step
kernel-mismatch bounds they satisfy relative to the variational gap.

A discrete joint over (example, grid point) induces a forward conditional,
a reverse conditional, and the composed grid-to-grid kernel; comparing the
encoder- and model-induced kernels gives a dynamical read of the same gap
the static audit decomposes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .infokl import d_bin
from .validation import check_count

_STATIONARY_TOL = 1e-8
_BOUND_TOL = 1e-8


def _row_kl(q_row: np.ndarray, p_row: np.ndarray) -> float:
    mask = q_row > 0.0
    if np.any(p_row[mask] <= 0.0):
        return math.inf
    qm = q_row[mask]
    return float(np.sum(qm * (np.log(qm) - np.log(p_row[mask]))))


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint law over (example, grid point) with its disintegrations."""

    table: np.ndarray = field(repr=False)
    x_marginal: np.ndarray
    z_marginal: np.ndarray
    forward: np.ndarray = field(repr=False)  # rows q(z | x)
    reverse: np.ndarray = field(repr=False)  # rows r(x | z)
    zero_z_rows: np.ndarray

    @classmethod
    def from_conditionals(cls, x_weights, conditionals) -> "DiscreteJoint":
        """Joint p(x) q(z|x) from example weights and per-example rows."""
        px = np.asarray(x_weights, dtype=np.float64)
        cond = np.atleast_2d(np.asarray(conditionals, dtype=np.float64))
        if px.ndim != 1 or px.shape[0] != cond.shape[0]:
            raise ValueError("x_weights must match the number of conditional rows")
        if np.any(px < 0) or abs(px.sum() - 1.0) > 1e-9:
            raise ValueError("x_weights must be a probability vector")
        rowsums = cond.sum(axis=1)
        if np.any(cond < 0) or np.any(np.abs(rowsums - 1.0) > 1e-9):
            raise ValueError("conditional rows must be probability vectors")
        table = px[:, None] * cond
        return cls._from_table(table, forward=cond)

    @classmethod
    def from_table(cls, table) -> "DiscreteJoint":
        table = np.atleast_2d(np.asarray(table, dtype=np.float64))
        if np.any(table < 0) or abs(table.sum() - 1.0) > 1e-9:
            raise ValueError("table must be a joint probability table")
        px = table.sum(axis=1)
        forward = np.where(px[:, None] > 0, table / np.where(px > 0, px, 1.0)[:, None], 1.0 / table.shape[1])
        return cls._from_table(table, forward=forward)

    @classmethod
    def _from_table(cls, table, forward):
        px = table.sum(axis=1)
        pz = table.sum(axis=0)
        zero = pz <= 0.0
        safe = np.where(zero, 1.0, pz)
        reverse = (table / safe[None, :]).T
        reverse[zero] = 1.0 / table.shape[0]
        return cls(
            table=table,
            x_marginal=px,
            z_marginal=pz,
            forward=forward,
            reverse=reverse,
            zero_z_rows=zero,
        )

    @property
    def n_examples(self) -> int:
        return self.table.shape[0]

    @property
    def grid_size(self) -> int:
        return self.table.shape[1]


@dataclass(frozen=True)
class GibbsKernel:
    """Row-stochastic grid-to-grid kernel; rows at zero-marginal grid
    points are uniform and flagged."""

    matrix: np.ndarray = field(repr=False)
    zero_rows: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_kernels(q_joint: DiscreteJoint, p_joint: DiscreteJoint) -> tuple[GibbsKernel, GibbsKernel]:
    """Compose reverse and forward conditionals into the two posterior-Gibbs
    kernels K(z, z') = sum_x r(x|z) cond(z'|x)."""
    if q_joint.table.shape != p_joint.table.shape:
        raise ValueError("joints must share example set and grid")
    k_q = q_joint.reverse @ q_joint.forward
    k_p = p_joint.reverse @ p_joint.forward
    return (
        GibbsKernel(k_q, q_joint.zero_z_rows.copy()),
        GibbsKernel(k_p, p_joint.zero_z_rows.copy()),
    )


def gap_terms(q_joint: DiscreteJoint, p_joint: DiscreteJoint) -> tuple[float, float]:
    """(mean per-example KL between the conditionals, KL of the grid
    marginals) for a pair of joints over the same examples."""
    if not np.allclose(q_joint.x_marginal, p_joint.x_marginal, atol=1e-12):
        raise ValueError("joints must share the example marginal")
    px = q_joint.x_marginal
    delta = sum(
        px[i] * _row_kl(q_joint.forward[i], p_joint.forward[i])
        for i in range(q_joint.n_examples)
        if px[i] > 0
    )
    return float(delta), _row_kl(q_joint.z_marginal, p_joint.z_marginal)


def lifted_mismatch(q_joint: DiscreteJoint, p_joint: DiscreteJoint) -> float:
    """E_{z ~ q-bar} KL of the lifted kernels L(z, dx, dz') = r(x|z) cond(z'|x),
    by direct triple sum; equals 2*delta - KL(q-bar || p-bar) exactly."""
    qbar = q_joint.z_marginal
    total = 0.0
    for z in range(q_joint.grid_size):
        if qbar[z] <= 0:
            continue
        lq = q_joint.reverse[z][:, None] * q_joint.forward
        lp = p_joint.reverse[z][:, None] * p_joint.forward
        total += qbar[z] * _row_kl(lq.ravel(), lp.ravel())
    return float(total)


@dataclass(frozen=True)
class MismatchCheck:
    lhs: float
    bound: float
    satisfied: bool

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "bound": self.bound, "satisfied": self.satisfied}


def one_step_mismatch(
    k_q: GibbsKernel, k_p: GibbsKernel, q_bar, delta_bar: float, kl_marginals: float
) -> MismatchCheck:
    """Expected one-step kernel KL under q-bar against 2*delta - KL(q||p)."""
    q_bar = np.asarray(q_bar, dtype=np.float64)
    lhs = sum(
        q_bar[z] * _row_kl(k_q.matrix[z], k_p.matrix[z])
        for z in range(k_q.size)
        if q_bar[z] > 0
    )
    bound = 2.0 * delta_bar - kl_marginals
    return MismatchCheck(float(lhs), bound, lhs <= bound + _BOUND_TOL)


@dataclass(frozen=True)
class PathMismatch:
    path_kl: float
    bound: float
    satisfied: bool
    stationary: bool
    per_step: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "path_kl": self.path_kl,
            "bound": self.bound,
            "satisfied": self.satisfied,
            "stationary": self.stationary,
            "per_step": list(self.per_step),
        }


def path_mismatch(
    k_q: GibbsKernel,
    k_p: GibbsKernel,
    q_bar,
    horizon: int,
    delta_bar: float,
    kl_marginals: float,
) -> PathMismatch:
    """Exact H-step path-space KL via the chain rule, with the H-linear
    bound. The q-chain marginal stays at q-bar when q-bar is stationary for
    K_q (true by construction; flagged if numerically violated)."""
    check_count(horizon, "horizon")
    q_bar = np.asarray(q_bar, dtype=np.float64)
    stationary = bool(np.abs(q_bar @ k_q.matrix - q_bar).sum() <= _STATIONARY_TOL)

    row_kls = np.array([_row_kl(k_q.matrix[z], k_p.matrix[z]) for z in range(k_q.size)])
    mu = q_bar.copy()
    per_step = []
    for _ in range(horizon):
        active = mu > 0
        step = float(np.sum(mu[active] * row_kls[active])) if np.all(np.isfinite(row_kls[active])) else math.inf
        per_step.append(step)
        mu = mu @ k_q.matrix
    path_kl = math.fsum(per_step)
    bound = horizon * (2.0 * delta_bar - kl_marginals)
    return PathMismatch(
        path_kl=path_kl,
        bound=bound,
        satisfied=path_kl <= bound + _BOUND_TOL,
        stationary=stationary,
        per_step=tuple(per_step),
    )


@dataclass(frozen=True)
class HorizonAgreement:
    horizon: int
    agreement_h: float
    eta_p_h: float
    binary_kl: float
    bound: float
    satisfied: bool

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "A_H": self.agreement_h,
            "eta_p_H": self.eta_p_h,
            "d_bin": self.binary_kl,
            "bound": self.bound,
            "satisfied": self.satisfied,
        }


def horizon_agreement(
    k_q: GibbsKernel,
    k_p: GibbsKernel,
    q_bar,
    labels_enc,
    labels_dec,
    horizon: int,
    delta_bar: float,
    kl_marginals: float,
) -> HorizonAgreement:
    """Endpoint-label disagreement of the two H-step chains started at
    q-bar, with the Bernoulli-KL bound at H times the one-step budget.

    horizon = 0 reproduces the static audit quantities.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    q_bar = np.asarray(q_bar, dtype=np.float64)
    event = np.asarray(labels_enc) != np.asarray(labels_dec)
    nu_q = q_bar.copy()
    nu_p = q_bar.copy()
    for _ in range(horizon):
        nu_q = nu_q @ k_q.matrix
        nu_p = nu_p @ k_p.matrix
    # normalize by the realized mass so saturated events give exactly 1
    eta_q_h = float(nu_q @ event) / float(nu_q.sum())
    eta_p_h = float(nu_p @ event) / float(nu_p.sum())
    binary = d_bin(min(eta_q_h, 1.0), min(eta_p_h, 1.0))
    bound = horizon * (2.0 * delta_bar - kl_marginals)
    return HorizonAgreement(
        horizon=horizon,
        agreement_h=1.0 - eta_q_h,
        eta_p_h=eta_p_h,
        binary_kl=binary,
        bound=bound,
        satisfied=binary <= bound + _BOUND_TOL,
    )
