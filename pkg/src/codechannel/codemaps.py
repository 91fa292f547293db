"""Hard-code maps on latent space: an encoder-side Voronoi-family rule built
from a Gaussian-mixture summary of the aggregate posterior, and a decoder-side
nearest-prototype rule under the Bernoulli/Categorical Bregman geometry of the
reconstruction term.

The decoder rule is evaluated three ways (direct divergence, additively
weighted Euclidean rewrite, Legendre-dual in logit space); the rewrites are
cross-checks and must agree with the direct rule away from ties.

Labels are 1-based; ties break to the lowest label everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from sklearn.base import BaseEstimator

from .validation import as_float_array, check_count, check_positive

OUTPUT_EPS = 1e-7  # decoder outputs are clipped to [eps, 1-eps]
_COV_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Gaussian mixture summary (hand-rolled EM so the fit trace is auditable)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: float


@dataclass(frozen=True)
class GmmSummary:
    """Best-of-restarts EM fit with its per-iteration log-likelihood trace."""

    components: list[GaussianComponent]
    fit_log: np.ndarray
    covariance_type: str
    converged: bool
    degenerate: bool = False

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    def covariances(self) -> np.ndarray:
        return np.stack([c.cov for c in self.components])

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "dim": self.dim,
            "means": self.means().tolist(),
            "covariances": self.covariances().tolist(),
            "weights": self.weights().tolist(),
            "covariance_type": self.covariance_type,
            "converged": self.converged,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSummary":
        comps = [
            GaussianComponent(np.array(m), np.array(c), w)
            for m, c, w in zip(d["means"], d["covariances"], d["weights"])
        ]
        return cls(
            components=comps,
            fit_log=np.array([]),
            covariance_type=d["covariance_type"],
            converged=d["converged"],
            degenerate=d.get("degenerate", False),
        )


def _log_gaussian(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance not positive definite")
    diff = X - mean
    maha = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov), diff)
    return -0.5 * (maha + d * math.log(2 * math.pi) + logdet)


def _kmeans_pp_centers(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    centers = [X[rng.integers(N)]]
    for _ in range(K - 1):
        d2 = np.min(
            [np.sum((X - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(N)
        else:
            idx = rng.choice(N, p=d2 / total)
        centers.append(X[idx])
    return np.stack(centers)


def _m_step(X, resp, covariance_type):
    N, d = X.shape
    nk = resp.sum(axis=0)
    weights = nk / N
    means = (resp.T @ X) / nk[:, None]
    covs = []
    for c in range(resp.shape[1]):
        diff = X - means[c]
        if covariance_type == "full":
            cov = (resp[:, c, None] * diff).T @ diff / nk[c]
        else:
            cov = np.diag((resp[:, c] * (diff**2).T).sum(axis=1) / nk[c])
        covs.append(cov + _COV_FLOOR * np.eye(d))
    return weights, means, np.stack(covs)


def _run_em(X, K, rng, max_iter, tol, covariance_type):
    N, d = X.shape
    means = _kmeans_pp_centers(X, K, rng)
    # hard-assignment bootstrap for weights/covariances
    assign = np.argmin(
        ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1
    )
    resp = np.zeros((N, K))
    resp[np.arange(N), assign] = 1.0
    resp = 0.9 * resp + 0.1 / K  # soften so no component starts empty
    weights, means, covs = _m_step(X, resp, covariance_type)

    fit_log = []
    converged = False
    for _ in range(max_iter):
        log_joint = np.stack(
            [
                math.log(weights[c]) + _log_gaussian(X, means[c], covs[c])
                for c in range(K)
            ],
            axis=1,
        )
        lse = _logsumexp(log_joint, axis=1)
        ll = float(lse.sum())
        fit_log.append(ll)
        if len(fit_log) > 1 and abs(fit_log[-1] - fit_log[-2]) < tol * max(1.0, abs(ll)):
            converged = True
            break
        resp = np.exp(log_joint - lse[:, None])
        weights, means, covs = _m_step(X, resp, covariance_type)
    return weights, means, covs, np.array(fit_log), converged


def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def fit_gmm(
    latent_samples,
    K: int,
    init_seed: int = 0,
    restarts: int = 5,
    max_iter: int = 200,
    tol: float = 1e-8,
    covariance: str = "auto",
) -> GmmSummary:
    """EM fit of a K-component Gaussian mixture with k-means++ seeding.

    ``covariance`` is ``full``, ``diag``, or ``auto`` (full for dimension
    <= 3, diagonal above). The best of ``restarts`` independently seeded
    runs is returned; ``fit_log`` holds its per-iteration log-likelihoods,
    which are non-decreasing up to the covariance floor.
    """
    X = as_float_array(latent_samples, "latent_samples", ndim=2)
    K = check_count(K, "K")
    if X.shape[0] < K:
        raise ValueError(f"need at least K={K} samples, got {X.shape[0]}")
    if covariance == "auto":
        covariance = "full" if X.shape[1] <= 3 else "diag"
    if covariance not in ("full", "diag"):
        raise ValueError(f"unknown covariance type {covariance!r}")

    d = X.shape[1]
    if np.ptp(X, axis=0).max() == 0.0:
        # all points identical: one effective component, flagged
        comp = [
            GaussianComponent(X[0].copy(), _COV_FLOOR * np.eye(d), 1.0 / K)
            for _ in range(K)
        ]
        ll = float(_log_gaussian(X, X[0], _COV_FLOOR * np.eye(d)).sum())
        return GmmSummary(comp, np.array([ll]), covariance, True, degenerate=True)

    best = None
    for r in range(restarts):
        rng = np.random.default_rng([init_seed, r])
        weights, means, covs, fit_log, converged = _run_em(
            X, K, rng, max_iter, tol, covariance
        )
        if best is None or fit_log[-1] > best[3][-1]:
            best = (weights, means, covs, fit_log, converged)

    weights, means, covs, fit_log, converged = best
    comps = [
        GaussianComponent(means[c], covs[c], float(weights[c])) for c in range(K)
    ]
    return GmmSummary(comps, fit_log, covariance, converged)


# ---------------------------------------------------------------------------
# Encoder-side code map
# ---------------------------------------------------------------------------


class EncoderCodeMap(BaseEstimator):
    """Labels latent points by the component with minimal Gaussian energy
    0.5*(z-mu)' Sigma^{-1} (z-mu) + 0.5*log|Sigma| - log(pi).

    Depending on the component shapes this is a plain Voronoi diagram
    (``isotropic_uniform``), an additively weighted one
    (``additively_weighted``), or a quadric decision diagram
    (``mahalanobis_quadric``).
    """

    TIE_BREAK = "lowest-index"

    def __init__(self, summary: GmmSummary):
        self.summary = summary
        means = summary.means()
        covs = summary.covariances()
        weights = summary.weights()
        self._means = means
        self._inv_covs = np.stack([np.linalg.inv(c) for c in covs])
        self._logdets = np.array([np.linalg.slogdet(c)[1] for c in covs])
        self._log_weights = np.log(weights)
        self.regime = self._detect_regime(covs, weights)

    @staticmethod
    def _detect_regime(covs, weights, rtol=1e-9):
        d = covs.shape[1]
        sigma2 = covs[0, 0, 0]
        isotropic_shared = all(
            np.allclose(c, sigma2 * np.eye(d), rtol=rtol, atol=1e-15) for c in covs
        )
        if isotropic_shared:
            if np.allclose(weights, weights[0], rtol=rtol):
                return "isotropic_uniform"
            return "additively_weighted"
        return "mahalanobis_quadric"

    def energies(self, Z) -> np.ndarray:
        Z = np.atleast_2d(as_float_array(Z, "Z"))
        diff = Z[:, None, :] - self._means[None, :, :]
        maha = np.einsum("nki,kij,nkj->nk", diff, self._inv_covs, diff)
        return 0.5 * maha + 0.5 * self._logdets[None, :] - self._log_weights[None, :]

    def predict(self, Z) -> np.ndarray:
        """1-based labels; argmin breaks ties toward the lowest label."""
        return np.argmin(self.energies(Z), axis=1) + 1

    def to_dict(self) -> dict:
        return {
            "kind": "encoder",
            "regime": self.regime,
            "tie_break": self.TIE_BREAK,
            "summary": self.summary.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderCodeMap":
        return cls(GmmSummary.from_dict(d["summary"]))


def encoder_label(code_map: EncoderCodeMap, z) -> int:
    """Label of a single latent point."""
    return int(code_map.predict(np.atleast_2d(z))[0])


# ---------------------------------------------------------------------------
# Decoder-side code map (Type-1 Bregman nearest prototype)
# ---------------------------------------------------------------------------


def _bernoulli_F(X):
    return np.sum(X * np.log(X) + (1.0 - X) * np.log1p(-X), axis=-1)


def _bernoulli_grad(X):
    return np.log(X) - np.log1p(-X)


def _bernoulli_dual_F(theta):
    # sum_k log(1 + e^theta_k), evaluated stably
    return np.sum(np.logaddexp(0.0, theta), axis=-1)


def _bernoulli_dual_grad(theta):
    out = np.empty_like(theta)
    pos = theta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-theta[pos]))
    out[~pos] = np.exp(theta[~pos]) / (1.0 + np.exp(theta[~pos]))
    return out


class DecoderCodeMap(BaseEstimator):
    """Nearest-prototype rule in decoder-output space under the Bregman
    divergence generated by the reconstruction likelihood.

    ``generator`` is ``bernoulli`` (outputs in (0,1)^M) or ``categorical``
    (outputs are ``positions`` stacked probability simplices, flattened).
    Prototypes are decoder outputs at reference latents, clipped to
    [OUTPUT_EPS, 1-OUTPUT_EPS].
    """

    TIE_BREAK = "lowest-index"

    def __init__(self, prototypes, generator: str = "bernoulli", positions: int | None = None):
        P = as_float_array(prototypes, "prototypes", ndim=2)
        P = np.clip(P, OUTPUT_EPS, 1.0 - OUTPUT_EPS)
        if generator not in ("bernoulli", "categorical"):
            raise ValueError(f"unknown generator {generator!r}")
        if generator == "categorical":
            if positions is None or P.shape[1] % positions != 0:
                raise ValueError("categorical generator needs positions dividing width")
        self.prototypes = P
        self.generator = generator
        self.positions = positions
        self._grad = self._grad_fn(P)
        # a_c = <d_c, grad F(d_c)> - F(d_c); the prototype-only part of D_F
        self._a = np.einsum("km,km->k", P, self._grad) - self._F(P)

    # generator plumbing -----------------------------------------------------

    def _per_position(self, X):
        n = X.shape[0]
        return X.reshape(n, self.positions, -1)

    def _F(self, X):
        X = np.atleast_2d(X)
        if self.generator == "bernoulli":
            return _bernoulli_F(X)
        return np.sum(X * np.log(X), axis=-1)

    def _grad_fn(self, X):
        X = np.atleast_2d(X)
        if self.generator == "bernoulli":
            return _bernoulli_grad(X)
        return 1.0 + np.log(X)

    def _dual_F(self, theta):
        if self.generator == "bernoulli":
            return _bernoulli_dual_F(theta)
        per = self._per_position(theta)
        amax = per.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(per - amax).sum(axis=-1)) + amax[..., 0]
        return lse.sum(axis=-1)

    def _dual_grad(self, theta):
        if self.generator == "bernoulli":
            return _bernoulli_dual_grad(theta)
        per = self._per_position(theta)
        amax = per.max(axis=-1, keepdims=True)
        e = np.exp(per - amax)
        return (e / e.sum(axis=-1, keepdims=True)).reshape(theta.shape)

    # labeling routes ----------------------------------------------------------

    def _clip(self, X):
        X = np.atleast_2d(as_float_array(X, "decoded_output"))
        return np.clip(X, OUTPUT_EPS, 1.0 - OUTPUT_EPS)

    def divergences(self, X) -> np.ndarray:
        """D_F(x || d_c) for each query row and prototype, directly."""
        X = self._clip(X)
        return self._F(X)[:, None] - (X @ self._grad.T) + self._a[None, :]

    def predict(self, X) -> np.ndarray:
        """1-based labels from the direct Type-1 divergence evaluation."""
        return np.argmin(self.divergences(X), axis=1) + 1

    def predict_affine(self, X) -> np.ndarray:
        """Same diagram rewritten as an additively weighted Euclidean rule
        with centers grad F(d_c)/2 and weights |grad F(d_c)|^2/4 - a_c."""
        X = self._clip(X)
        centers = self._grad / 2.0
        w = np.einsum("km,km->k", self._grad, self._grad) / 4.0 - self._a
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2 - w[None, :], axis=1) + 1

    def predict_dual(self, X) -> np.ndarray:
        """Same diagram computed in gradient (logit) coordinates via the
        convex conjugate of the generator."""
        X = self._clip(X)
        theta_x = self._grad_fn(X)
        theta_c = self._grad
        grad_dual = self._dual_grad(theta_x)
        scores = (
            self._dual_F(theta_c)[None, :]
            - (grad_dual @ theta_c.T)
            + np.einsum("nm,nm->n", grad_dual, theta_x)[:, None]
            - self._dual_F(theta_x)[:, None]
        )
        return np.argmin(scores, axis=1) + 1

    def margins(self, X) -> np.ndarray:
        """Gap between the two smallest divergences per query; near-zero
        margins mark effective ties."""
        div = self.divergences(X)
        part = np.partition(div, 1, axis=1)
        return part[:, 1] - part[:, 0]

    @classmethod
    def from_decoder(cls, decoder, reference_latents, generator="bernoulli", positions=None):
        """Build prototypes by decoding reference latents (component means)."""
        Z = np.atleast_2d(as_float_array(reference_latents, "reference_latents"))
        prototypes = np.stack([np.asarray(decoder(z), dtype=np.float64).ravel() for z in Z])
        return cls(prototypes, generator=generator, positions=positions)

    def min_prototype_separation(self) -> float:
        """Smallest pairwise divergence among prototypes; zero means the
        labeling cannot distinguish two codes."""
        div = self.divergences(self.prototypes)
        K = div.shape[0]
        mask = ~np.eye(K, dtype=bool)
        return float(div[mask].min()) if K > 1 else math.inf

    def to_dict(self) -> dict:
        return {
            "kind": "decoder",
            "generator": self.generator,
            "positions": self.positions,
            "eps": OUTPUT_EPS,
            "tie_break": self.TIE_BREAK,
            "prototypes": self.prototypes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderCodeMap":
        return cls(np.array(d["prototypes"]), d["generator"], d.get("positions"))


def decoder_label(code_map: DecoderCodeMap, decoded_output) -> int:
    return int(code_map.predict(np.atleast_2d(decoded_output))[0])


def affine_reformulation_label(code_map: DecoderCodeMap, decoded_output) -> int:
    return int(code_map.predict_affine(np.atleast_2d(decoded_output))[0])


def legendre_dual_label(code_map: DecoderCodeMap, decoded_output) -> int:
    return int(code_map.predict_dual(np.atleast_2d(decoded_output))[0])


# ---------------------------------------------------------------------------
# sklearn-style fittable wrapper
# ---------------------------------------------------------------------------


class GmmCodebook(BaseEstimator):
    """Fit a GMM summary of latent samples and label points by its
    Voronoi-family rule; composes with sklearn tooling via get_params."""

    def __init__(
        self,
        n_codes: int = 4,
        covariance: str = "auto",
        restarts: int = 5,
        max_iter: int = 200,
        tol: float = 1e-8,
        random_state: int = 0,
    ):
        self.n_codes = n_codes
        self.covariance = covariance
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        self.summary_ = fit_gmm(
            X,
            self.n_codes,
            init_seed=self.random_state,
            restarts=self.restarts,
            max_iter=self.max_iter,
            tol=self.tol,
            covariance=self.covariance,
        )
        self.code_map_ = EncoderCodeMap(self.summary_)
        return self

    def predict(self, X) -> np.ndarray:
        return self.code_map_.predict(X)


# ---------------------------------------------------------------------------
# Fisher mismatch diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FisherMismatch:
    """Per-component mismatch between the encoder precision and the decoder
    pullback Fisher metric, plus the mass-weighted total."""

    kappa: np.ndarray
    kappa_inv: np.ndarray
    a_star: np.ndarray
    weighted_kappa_sum: float
    jacobian_spectral_norms: np.ndarray
    mean_jacobian_norm: float
    singular: np.ndarray


def _decoder_jacobian(decoder, z: np.ndarray, fd_step: float) -> np.ndarray:
    if hasattr(decoder, "jacobian"):
        return np.asarray(decoder.jacobian(z), dtype=np.float64)
    cols = []
    for i in range(z.shape[0]):
        h = fd_step * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fp = np.asarray(decoder(zp), dtype=np.float64).ravel()
        fm = np.asarray(decoder(zm), dtype=np.float64).ravel()
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def fisher_mismatch(summary: GmmSummary, decoder, fd_step: float = 1e-4) -> FisherMismatch:
    """For each mixture component, compare the encoder precision Sigma^{-1}
    against the decoder pullback metric G = J' diag(d(1-d))^{-1} J at the
    component mean.

    kappa_c is the Frobenius distance after the best positive rescaling
    a_star = <Sigma^{-1}, G> / |G|^2; kappa_inv is the scale-free variant
    sum_i log(lambda_i)^2 over the spectrum of Sigma G^{-1} (NaN when G is
    numerically singular).
    """
    check_positive(fd_step, "fd_step")
    K = summary.K
    kappa = np.zeros(K)
    kappa_inv = np.zeros(K)
    a_star = np.zeros(K)
    jnorm = np.zeros(K)
    singular = np.zeros(K, dtype=bool)
    weights = summary.weights()

    for c, comp in enumerate(summary.components):
        mu = comp.mean
        J = _decoder_jacobian(decoder, mu, fd_step)
        d = np.clip(np.asarray(decoder(mu), dtype=np.float64).ravel(), OUTPUT_EPS, 1 - OUTPUT_EPS)
        G = J.T @ (J / (d * (1.0 - d))[:, None])
        prec = np.linalg.inv(comp.cov)
        jnorm[c] = np.linalg.norm(J, 2)

        g_norm2 = np.sum(G * G)
        if g_norm2 <= 0:
            a_star[c] = math.nan
            kappa[c] = np.linalg.norm(prec, "fro")
            kappa_inv[c] = math.nan
            singular[c] = True
            continue
        a_star[c] = float(np.sum(prec * G) / g_norm2)
        kappa[c] = float(np.linalg.norm(prec - a_star[c] * G, "fro"))

        if np.linalg.cond(G) > 1e12:
            kappa_inv[c] = math.nan
            singular[c] = True
        else:
            # eigenvalues of Sigma G^{-1} via the generalized problem
            # Sigma v = lambda G v (both SPD, so the spectrum is positive)
            lam = eigh(comp.cov, G, eigvals_only=True)
            kappa_inv[c] = float(np.sum(np.log(lam) ** 2))

    return FisherMismatch(
        kappa=kappa,
        kappa_inv=kappa_inv,
        a_star=a_star,
        weighted_kappa_sum=float(np.sum(weights * kappa)),
        jacobian_spectral_norms=jnorm,
        mean_jacobian_norm=float(jnorm.mean()),
        singular=singular,
    )


def bregman_margin_percentile(code_map: DecoderCodeMap, decoded_points, percentile: float = 5.0) -> float:
    """Percentile of per-point margins to the nearest decision boundary in
    divergence units; a small value flags queries crowding the bisectors."""
    margins = code_map.margins(decoded_points)
    return float(np.percentile(margins, percentile))
