"""Exact certificate audit on a weighted latent grid: discrete encoder and
model posteriors, the per-example gap, the binary disagreement certificate,
and the four-term decomposition with its closure check.

Everything here is a finite sum; the only approximation relative to the
continuous model is the grid itself.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import JointCodeTable
from .infokl import BoundInversion, bretagnolle_huber_upper, d_bin, invert_bound, pinsker_upper
from .validation import as_float_array

_CLOSURE_TOL = 1e-8
_VALIDITY_TOL = 1e-6


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentGrid:
    points: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray
    bounds: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]
    weighting: str

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_grid(bounds, resolution, weighting: str = "prior") -> LatentGrid:
    """Tensor-product grid over per-axis intervals.

    ``weighting='uniform'`` gives equal weights; ``'prior'`` evaluates the
    standard normal density at the grid points and normalizes.
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    if not bounds:
        raise ValueError("bounds must be non-empty")
    for lo, hi in bounds:
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid axis bounds ({lo}, {hi})")
    if np.isscalar(resolution):
        resolution = [int(resolution)] * len(bounds)
    resolution = [int(r) for r in resolution]
    if len(resolution) != len(bounds):
        raise ValueError("resolution must match the number of axes")
    if min(resolution) < 2:
        raise ValueError("resolution must be >= 2 per axis")

    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, resolution)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)

    if weighting == "uniform":
        log_w = np.full(points.shape[0], -math.log(points.shape[0]))
    elif weighting == "prior":
        logpdf = -0.5 * ((points**2).sum(axis=1) + points.shape[1] * math.log(2 * math.pi))
        log_w = logpdf - _logsumexp(logpdf)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    weights = np.exp(log_w)
    weights = weights / weights.sum()
    return LatentGrid(
        points=points,
        weights=weights,
        log_weights=log_w,
        bounds=tuple(bounds),
        resolution=tuple(resolution),
        weighting=weighting,
    )


def data_bounds(latents, margin: float = 0.5) -> list[tuple[float, float]]:
    """Per-axis [min - margin, max + margin] box around encoded latents."""
    Z = np.atleast_2d(as_float_array(latents, "latents"))
    return [(float(lo - margin), float(hi + margin)) for lo, hi in zip(Z.min(0), Z.max(0))]


def _logsumexp(a) -> float:
    amax = float(np.max(a))
    if not math.isfinite(amax):
        amax = 0.0
    return float(np.log(np.exp(a - amax).sum()) + amax)


# ---------------------------------------------------------------------------
# Discrete posteriors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridPosteriorSet:
    """Per-example discrete posteriors on a shared grid.

    ``q``/``p`` are (N, M) probability rows; ``log_q``/``log_p`` their
    log-space versions; ``delta`` the per-example KL(q || p) with +inf where
    q places mass on a numerically-zero p cell (flagged in
    ``ac_violation``).
    """

    q: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)
    log_q: np.ndarray = field(repr=False)
    log_p: np.ndarray = field(repr=False)
    log_evidence: np.ndarray
    delta: np.ndarray
    ac_violation: np.ndarray

    @property
    def n_examples(self) -> int:
        return self.q.shape[0]


def grid_posteriors(model, X, grid: LatentGrid) -> GridPosteriorSet:
    """Normalize both the model posterior p(x|z)w and the encoder posterior
    q(z|x)w on the grid, in log space, and take the per-example KL."""
    X = np.atleast_2d(X)
    log_lik = model.log_likelihood_matrix(X, grid.points)
    ell = log_lik + grid.log_weights[None, :]
    log_evidence = _lse_rows(ell)
    log_p = ell - log_evidence[:, None]
    p = np.exp(log_p)

    log_q_raw = model.log_q_matrix(X, grid.points) + grid.log_weights[None, :]
    log_q = log_q_raw - _lse_rows(log_q_raw)[:, None]
    q = np.exp(log_q)

    violation = np.any((q > 0.0) & (p == 0.0), axis=1)
    contrib = np.where(q > 0.0, q * (log_q - log_p), 0.0)
    delta = np.where(violation, math.inf, contrib.sum(axis=1))
    return GridPosteriorSet(
        q=q,
        p=p,
        log_q=log_q,
        log_p=log_p,
        log_evidence=log_evidence,
        delta=delta,
        ac_violation=violation,
    )


def _lse_rows(a):
    amax = a.max(axis=1)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return np.log(np.exp(a - amax[:, None]).sum(axis=1)) + amax


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    """All scalar outputs of one grid audit plus the per-example rows."""

    n_examples: int
    grid_size: int
    weighting: str
    delta_bar: float
    d_bin: float
    jensen: float
    rho: float
    rho_by_difference: float
    closure_residual: float
    eta_q_bar: float
    eta_p_bar: float
    agreement_q: float
    agreement_p: float
    code_pair_kl: float
    kl_grid_marginals: float
    validity: bool
    per_example_dpi: bool
    coarsening_valid: bool
    ac_violation: bool
    p_star: BoundInversion | None
    pinsker_bound: float
    bh_bound: float
    per_example: dict = field(repr=False)
    agreement_mu: float | None = None

    def to_dict(self, include_per_example: bool = True) -> dict:
        d = {
            "n_examples": self.n_examples,
            "grid_size": self.grid_size,
            "weighting": self.weighting,
            "delta_bar": self.delta_bar,
            "d_bin": self.d_bin,
            "jensen": self.jensen,
            "rho": self.rho,
            "rho_by_difference": self.rho_by_difference,
            "closure_residual": self.closure_residual,
            "eta_q_bar": self.eta_q_bar,
            "eta_p_bar": self.eta_p_bar,
            "A_q": self.agreement_q,
            "A_p": self.agreement_p,
            "A_mu": self.agreement_mu,
            "code_pair_kl": self.code_pair_kl,
            "kl_grid_marginals": self.kl_grid_marginals,
            "validity": self.validity,
            "per_example_dpi": self.per_example_dpi,
            "coarsening_valid": self.coarsening_valid,
            "ac_violation": self.ac_violation,
            "p_star": None if self.p_star is None else self.p_star.p_star,
            "p_star_vacuous": None if self.p_star is None else self.p_star.vacuous,
            "pinsker_bound": self.pinsker_bound,
            "bh_bound": self.bh_bound,
        }
        if include_per_example:
            d["per_example"] = {k: list(v) for k, v in self.per_example.items()}
        return d

    def to_json(self, path, include_per_example: bool = True) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_per_example), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_per_example_csv(self, path) -> None:
        cols = ["index", "delta", "eta_q", "eta_p", "d_bin", "rho"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for i in range(self.n_examples):
                writer.writerow(
                    [
                        i,
                        repr(self.per_example["delta"][i]),
                        repr(self.per_example["eta_q"][i]),
                        repr(self.per_example["eta_p"][i]),
                        repr(self.per_example["d_bin"][i]),
                        repr(self.per_example["rho"][i]),
                    ]
                )


def _conditional_kl(q_row, p_row, log_q_row, log_p_row, mask):
    """KL between the q and p conditionals given the event ``mask``, plus
    the q-mass of the event. Zero-mass events contribute nothing."""
    q_mass = float(q_row[mask].sum())
    if q_mass <= 0.0:
        return 0.0, q_mass
    p_mass = float(p_row[mask].sum())
    if p_mass <= 0.0:
        return math.inf, q_mass
    lq = log_q_row[mask] - math.log(q_mass)
    lp = log_p_row[mask] - math.log(p_mass)
    qc = q_row[mask] / q_mass
    keep = qc > 0.0
    return float(np.sum(qc[keep] * (lq[keep] - lp[keep]))), q_mass


def audit_exact(
    posteriors: GridPosteriorSet,
    enc_map,
    dec_map,
    decoder,
    grid: LatentGrid,
) -> AuditReport:
    """Run the certificate audit: disagreement indicator on the grid, exact
    per-example rates, the Bernoulli certificate, the Jensen and within-cell
    residuals (the latter by two independent routes), and the pushforward KL
    of the joint label pair.

    ``decoder`` maps a batch of latent points to decoder outputs and is used
    to pull the decoder code map back onto the grid.
    """
    labels_enc = enc_map.predict(grid.points)
    labels_dec = dec_map.predict(decoder(grid.points))
    event = labels_enc != labels_dec

    q, p = posteriors.q, posteriors.p
    # normalize by the realized row mass so a saturated event reads exactly 1
    eta_q = (q @ event) / q.sum(axis=1)
    eta_p = (p @ event) / p.sum(axis=1)
    eta_q_bar = float(eta_q.mean())
    eta_p_bar = float(eta_p.mean())
    delta_bar = float(posteriors.delta.mean())

    d_bin_bar = d_bin(min(eta_q_bar, 1.0), min(eta_p_bar, 1.0))
    d_bin_pointwise = np.array(
        [d_bin(min(a, 1.0), min(b, 1.0)) for a, b in zip(eta_q, eta_p)]
    )
    d_bin_mean = float(d_bin_pointwise.mean())
    finite = math.isfinite(delta_bar) and math.isfinite(d_bin_mean) and math.isfinite(d_bin_bar)
    jensen = d_bin_mean - d_bin_bar if finite else math.nan
    rho_by_difference = delta_bar - d_bin_bar - jensen if finite else math.nan

    # independent route: exact conditional KLs on the event and complement
    rho_pointwise = np.empty(posteriors.n_examples)
    for n in range(posteriors.n_examples):
        kl_e, mass_e = _conditional_kl(
            q[n], p[n], posteriors.log_q[n], posteriors.log_p[n], event
        )
        kl_c, _ = _conditional_kl(
            q[n], p[n], posteriors.log_q[n], posteriors.log_p[n], ~event
        )
        rho_pointwise[n] = mass_e * kl_e + (1.0 - mass_e) * kl_c
    rho = float(rho_pointwise.mean())
    closure_residual = abs(delta_bar - (d_bin_bar + jensen + rho))

    # coarsening hierarchy: binary event <= label pair <= full grid law
    q_bar = q.mean(axis=0)
    p_bar = p.mean(axis=0)
    code_pair_kl = _pair_pushforward_kl(q_bar, p_bar, labels_enc, labels_dec)
    mask = q_bar > 0.0
    if np.any(p_bar[mask] <= 0.0):
        kl_marginals = math.inf
    else:
        kl_marginals = float(np.sum(q_bar[mask] * (np.log(q_bar[mask]) - np.log(p_bar[mask]))))

    ac_violation = bool(posteriors.ac_violation.any())
    validity = (delta_bar >= d_bin_bar - _VALIDITY_TOL) and not ac_violation
    per_example_dpi = bool(np.all(d_bin_pointwise <= posteriors.delta + _VALIDITY_TOL))
    coarsening_valid = (
        d_bin_bar <= code_pair_kl + _VALIDITY_TOL
        and code_pair_kl <= delta_bar + _VALIDITY_TOL
    )

    if 0.0 < eta_p_bar < 1.0 and math.isfinite(delta_bar):
        inversion = invert_bound(eta_p_bar, delta_bar)
        pinsker = pinsker_upper(eta_p_bar, delta_bar)
        bh = bretagnolle_huber_upper(eta_p_bar, delta_bar)
    else:
        inversion = None
        pinsker = math.nan
        bh = math.nan

    return AuditReport(
        n_examples=posteriors.n_examples,
        grid_size=grid.size,
        weighting=grid.weighting,
        delta_bar=delta_bar,
        d_bin=d_bin_bar,
        jensen=jensen,
        rho=rho,
        rho_by_difference=rho_by_difference,
        closure_residual=closure_residual,
        eta_q_bar=eta_q_bar,
        eta_p_bar=eta_p_bar,
        agreement_q=1.0 - eta_q_bar,
        agreement_p=1.0 - eta_p_bar,
        code_pair_kl=code_pair_kl,
        kl_grid_marginals=kl_marginals,
        validity=validity,
        per_example_dpi=per_example_dpi,
        coarsening_valid=coarsening_valid,
        ac_violation=ac_violation,
        p_star=inversion,
        pinsker_bound=pinsker,
        bh_bound=bh,
        per_example={
            "delta": posteriors.delta.copy(),
            "eta_q": eta_q,
            "eta_p": eta_p,
            "d_bin": d_bin_pointwise,
            "rho": rho_pointwise,
        },
    )


def _pair_pushforward_kl(q_bar, p_bar, labels_enc, labels_dec) -> float:
    K = int(max(labels_enc.max(), labels_dec.max()))
    mass_q = np.zeros((K, K))
    mass_p = np.zeros((K, K))
    np.add.at(mass_q, (labels_enc - 1, labels_dec - 1), q_bar)
    np.add.at(mass_p, (labels_enc - 1, labels_dec - 1), p_bar)
    terms = []
    for i, j in zip(*np.nonzero(mass_q > 0)):
        if mass_p[i, j] <= 0:
            return math.inf
        terms.append(mass_q[i, j] * (math.log(mass_q[i, j]) - math.log(mass_p[i, j])))
    return math.fsum(terms)


def event_probability_bound(posteriors: GridPosteriorSet, event_mask) -> tuple[float, float]:
    """(d_bin of the event under the grid marginals, mean gap); any
    measurable grid event must satisfy the first <= the second."""
    event_mask = np.asarray(event_mask, dtype=bool)
    q_bar = posteriors.q.mean(axis=0)
    p_bar = posteriors.p.mean(axis=0)
    return (
        d_bin(float(q_bar[event_mask].sum()), float(p_bar[event_mask].sum())),
        float(posteriors.delta.mean()),
    )


def joint_table_from_grid(grid_marginal, labels_enc, labels_dec, K: int) -> JointCodeTable:
    """Grid-weighted joint label table; its diagonal is the grid-law
    agreement."""
    cells = np.zeros((K, K))
    np.add.at(cells, (np.asarray(labels_enc) - 1, np.asarray(labels_dec) - 1), grid_marginal)
    total = cells.sum()
    if total <= 0:
        raise ValueError("grid marginal has no mass")
    return JointCodeTable(cells / total, sample_count=0)


def mean_code_agreement(model, X, enc_map, dec_map, decoder) -> float:
    """Fraction of examples whose encoder-mean latent gets the same label
    from both maps."""
    mu = model.encode_mean(np.atleast_2d(X))
    return float(np.mean(enc_map.predict(mu) == dec_map.predict(decoder(mu))))


def free_energy_stack(report: AuditReport, reconstruction_term: float) -> dict:
    """Four-component stack: the reconstruction/entropy term plus the three
    gap components, with the closure residual of the identity."""
    return {
        "f_term": float(reconstruction_term),
        "d_bin": report.d_bin,
        "jensen": report.jensen,
        "rho": report.rho,
        "total": float(reconstruction_term) + report.d_bin + report.jensen + report.rho,
        "closure_residual": report.closure_residual,
    }
