"""A small diagonal-Gaussian-encoder MLP VAE with a product-Bernoulli or
product-Categorical decoder, trained by Adam on hand-written reverse-mode
gradients. Deliberately desk-scale: full-batch, float64, deterministic per
seed, with bit-exact snapshots.

Decoder probabilities are clipped to [OUTPUT_EPS, 1-OUTPUT_EPS] before any
likelihood evaluation, so grid audits never meet a -inf log-likelihood.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .codemaps import OUTPUT_EPS
from .validation import check_count

_LOG2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


class SnapshotError(RuntimeError):
    pass


@dataclass
class VaeSpec:
    """Architecture description used to initialize a model."""

    input_dim: int
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    likelihood: str = "bernoulli"  # or "categorical"
    vocab: int | None = None
    positions: int | None = None
    beta: float = 1.0

    def __post_init__(self):
        if self.likelihood not in ("bernoulli", "categorical"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "categorical":
            if not (self.vocab and self.positions):
                raise ValueError("categorical likelihood needs vocab and positions")
            if self.input_dim != self.positions:
                raise ValueError("categorical input_dim must equal positions (token columns)")

    @property
    def output_dim(self) -> int:
        if self.likelihood == "categorical":
            return self.vocab * self.positions
        return self.input_dim

    @property
    def encoder_input_dim(self) -> int:
        # tokens enter the encoder one-hot encoded
        if self.likelihood == "categorical":
            return self.vocab * self.positions
        return self.input_dim


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 800
    seed: int = 0
    eval_every: int = 20
    beta_schedule: str = "constant"  # or "warmup"
    warmup_epochs: int = 0

    def beta_factor(self, epoch: int) -> float:
        if self.beta_schedule == "constant":
            return 1.0
        if self.beta_schedule == "warmup":
            if self.warmup_epochs <= 0:
                return 1.0
            return min(1.0, (epoch + 1) / self.warmup_epochs)
        raise ValueError(f"unknown beta schedule {self.beta_schedule!r}")


@dataclass
class VaeModel:
    """Weights plus enough metadata to evaluate every audit quantity."""

    spec: VaeSpec
    enc_weights: list[np.ndarray] = field(repr=False)
    enc_biases: list[np.ndarray] = field(repr=False)
    dec_weights: list[np.ndarray] = field(repr=False)
    dec_biases: list[np.ndarray] = field(repr=False)

    # ---- forward passes ---------------------------------------------------

    def _encoder_input(self, X: np.ndarray) -> np.ndarray:
        if self.spec.likelihood == "categorical":
            return one_hot_tokens(X, self.spec.vocab)
        return np.asarray(X, dtype=np.float64)

    def _mlp_forward(self, h, weights, biases):
        activations = [h]
        for W, b in zip(weights[:-1], biases[:-1]):
            h = np.tanh(h @ W + b)
            activations.append(h)
        out = h @ weights[-1] + biases[-1]
        return out, activations

    def encode(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Posterior parameters (mu, logvar) for a batch."""
        h = self._encoder_input(np.atleast_2d(X))
        out, _ = self._mlp_forward(h, self.enc_weights, self.enc_biases)
        d = self.spec.latent_dim
        return out[:, :d], out[:, d:]

    def encode_mean(self, X) -> np.ndarray:
        return self.encode(X)[0]

    def decode_logits(self, Z) -> np.ndarray:
        out, _ = self._mlp_forward(np.atleast_2d(Z), self.dec_weights, self.dec_biases)
        return out

    def decode_probs(self, Z) -> np.ndarray:
        """Decoder output probabilities, clipped away from {0, 1}."""
        logits = self.decode_logits(Z)
        if self.spec.likelihood == "bernoulli":
            probs = _sigmoid(logits)
        else:
            n = logits.shape[0]
            per = logits.reshape(n, self.spec.positions, self.spec.vocab)
            probs = _softmax(per).reshape(n, -1)
        return np.clip(probs, OUTPUT_EPS, 1.0 - OUTPUT_EPS)

    def decoder_fn(self):
        """Single-point decoder closure for code-map construction."""
        return lambda z: self.decode_probs(np.atleast_2d(z))[0]

    # ---- log densities -----------------------------------------------------

    def log_likelihood_matrix(self, X, Z) -> np.ndarray:
        """log p(x_n | z_m) for every example/latent pair, shape (N, M)."""
        X = np.atleast_2d(X)
        probs = self.decode_probs(np.atleast_2d(Z))
        if self.spec.likelihood == "bernoulli":
            Xf = np.asarray(X, dtype=np.float64)
            return Xf @ np.log(probs).T + (1.0 - Xf) @ np.log1p(-probs).T
        L, V = self.spec.positions, self.spec.vocab
        logp = np.log(probs).reshape(-1, L, V)
        idx = np.asarray(X, dtype=np.int64) - 1
        if idx.min() < 0 or idx.max() >= V:
            raise ValueError(f"token values must lie in 1..{V}")
        out = np.zeros((X.shape[0], logp.shape[0]))
        for pos in range(L):
            out += logp[:, pos, :][:, idx[:, pos]].T
        return out

    def log_q_matrix(self, X, Z) -> np.ndarray:
        """log q(z_m | x_n) under the diagonal-Gaussian encoder, (N, M)."""
        mu, logvar = self.encode(X)
        Z = np.atleast_2d(Z)
        inv_var = np.exp(-logvar)
        diff2 = (Z[None, :, :] - mu[:, None, :]) ** 2
        quad = np.einsum("nmd,nd->nm", diff2, inv_var)
        norm = (logvar.sum(axis=1) + self.spec.latent_dim * _LOG2PI)[:, None]
        return -0.5 * (quad + norm)

    def log_prior(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        return -0.5 * ((Z**2).sum(axis=1) + Z.shape[1] * _LOG2PI)

    def sample_posterior(self, x, k: int, rng: np.random.Generator) -> np.ndarray:
        mu, logvar = self.encode(np.atleast_2d(x))
        eps = rng.standard_normal((k, self.spec.latent_dim))
        return mu[0] + np.exp(0.5 * logvar[0]) * eps

    def parameters(self):
        return self.enc_weights + self.enc_biases + self.dec_weights + self.dec_biases


def one_hot_tokens(X, vocab: int) -> np.ndarray:
    idx = np.asarray(np.atleast_2d(X), dtype=np.int64) - 1
    if idx.min() < 0 or idx.max() >= vocab:
        raise ValueError(f"token values must lie in 1..{vocab}")
    n, L = idx.shape
    out = np.zeros((n, L * vocab))
    flat = idx + np.arange(L)[None, :] * vocab
    np.put_along_axis(out, flat, 1.0, axis=1)
    return out


def _sigmoid(y):
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out


def _softmax(per):
    amax = per.max(axis=-1, keepdims=True)
    e = np.exp(per - amax)
    return e / e.sum(axis=-1, keepdims=True)


def init_model(spec: VaeSpec, seed: int = 0) -> VaeModel:
    rng = np.random.default_rng(seed)
    enc_dims = [spec.encoder_input_dim, *spec.hidden, 2 * spec.latent_dim]
    dec_dims = [spec.latent_dim, *spec.hidden, spec.output_dim]

    def make(dims):
        Ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            Ws.append(rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return Ws, bs

    enc_w, enc_b = make(enc_dims)
    dec_w, dec_b = make(dec_dims)
    return VaeModel(spec, enc_w, enc_b, dec_w, dec_b)


# ---------------------------------------------------------------------------
# Objective and gradients
# ---------------------------------------------------------------------------


def elbo_terms(model: VaeModel, X, z_sample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example (reconstruction log-likelihood, rate KL, beta-ELBO) at a
    given latent sample."""
    X = np.atleast_2d(X)
    Z = np.atleast_2d(z_sample)
    mu, logvar = model.encode(X)
    rate = 0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)
    recon = _recon_loglik(model, X, Z)
    return recon, rate, recon - model.spec.beta * rate


def _recon_loglik(model: VaeModel, X, Z) -> np.ndarray:
    logits = model.decode_logits(Z)
    if model.spec.likelihood == "bernoulli":
        probs = np.clip(_sigmoid(logits), OUTPUT_EPS, 1.0 - OUTPUT_EPS)
        Xf = np.asarray(X, dtype=np.float64)
        return (Xf * np.log(probs) + (1.0 - Xf) * np.log1p(-probs)).sum(axis=1)
    L, V = model.spec.positions, model.spec.vocab
    per = logits.reshape(-1, L, V)
    logp = per - _logsumexp_last(per)
    logp = np.maximum(logp, math.log(OUTPUT_EPS))
    idx = np.asarray(X, dtype=np.int64) - 1
    return np.take_along_axis(logp, idx[:, :, None], axis=2)[:, :, 0].sum(axis=1)


def _logsumexp_last(a):
    amax = a.max(axis=-1, keepdims=True)
    return np.log(np.exp(a - amax).sum(axis=-1, keepdims=True)) + amax


def loss_and_grads(model: VaeModel, X, eps_noise: np.ndarray, beta: float):
    """Full-batch loss -mean(recon - beta*rate) and gradients for every
    weight, with the latent sample fixed by ``eps_noise``.

    Returns (loss, grads, mean_recon, mean_rate); ``grads`` mirrors
    model.parameters() ordering.
    """
    spec = model.spec
    X = np.atleast_2d(X)
    N = X.shape[0]
    d = spec.latent_dim

    # encoder forward
    h = model._encoder_input(X)
    enc_out, enc_acts = model._mlp_forward(h, model.enc_weights, model.enc_biases)
    mu, logvar = enc_out[:, :d], enc_out[:, d:]
    sigma = np.exp(0.5 * logvar)
    Z = mu + sigma * eps_noise

    # decoder forward
    logits, dec_acts = model._mlp_forward(Z, model.dec_weights, model.dec_biases)

    if spec.likelihood == "bernoulli":
        sig = _sigmoid(logits)
        probs = np.clip(sig, OUTPUT_EPS, 1.0 - OUTPUT_EPS)
        Xf = np.asarray(X, dtype=np.float64)
        recon = (Xf * np.log(probs) + (1.0 - Xf) * np.log1p(-probs)).sum(axis=1)
        unclipped = (sig > OUTPUT_EPS) & (sig < 1.0 - OUTPUT_EPS)
        drecon_dlogits = (Xf - sig) * unclipped
    else:
        L, V = spec.positions, spec.vocab
        per = logits.reshape(N, L, V)
        logp = per - _logsumexp_last(per)
        idx = np.asarray(X, dtype=np.int64) - 1
        picked = np.take_along_axis(logp, idx[:, :, None], axis=2)[:, :, 0]
        clipped = picked < math.log(OUTPUT_EPS)
        recon = np.maximum(picked, math.log(OUTPUT_EPS)).sum(axis=1)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[:, :, None], 1.0, axis=2)
        dper = onehot - p
        dper[clipped] = 0.0
        drecon_dlogits = dper.reshape(N, -1)

    rate = 0.5 * (mu**2 + sigma**2 - 1.0 - logvar).sum(axis=1)
    loss = float(np.mean(beta * rate - recon))

    # backward through the decoder
    dlogits = -drecon_dlogits / N
    dZ, dec_wgrads, dec_bgrads = _mlp_backward(
        dlogits, dec_acts, model.dec_weights
    )

    # reparameterization and rate terms
    dmu = dZ + (beta / N) * mu
    dlogvar = dZ * (0.5 * sigma * eps_noise) + (beta / N) * 0.5 * (sigma**2 - 1.0)
    denc_out = np.concatenate([dmu, dlogvar], axis=1)
    _, enc_wgrads, enc_bgrads = _mlp_backward(denc_out, enc_acts, model.enc_weights)

    grads = enc_wgrads + enc_bgrads + dec_wgrads + dec_bgrads
    return loss, grads, float(recon.mean()), float(rate.mean())


def _mlp_backward(dout, activations, weights):
    """Backprop an MLP whose hidden activations are tanh and whose final
    layer is linear; activations[i] is the input to layer i."""
    wgrads = [None] * len(weights)
    bgrads = [None] * len(weights)
    delta = dout
    for i in reversed(range(len(weights))):
        h_in = activations[i]
        wgrads[i] = h_in.T @ delta
        bgrads[i] = delta.sum(axis=0)
        if i > 0:
            dh = delta @ weights[i].T
            delta = dh * (1.0 - activations[i] ** 2)
    dinput = delta @ weights[0].T if len(weights) else dout
    return dinput, wgrads, bgrads


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: VaeModel
    curve: list[dict]


def train(spec: VaeSpec, X, config: TrainConfig) -> TrainResult:
    """Full-batch Adam training of a freshly initialized model.

    Deterministic given (spec, data, config); raises TrainingDiverged with
    the epoch index if the loss goes non-finite.
    """
    if config.lr < 0:
        raise ValueError("lr must be >= 0")
    check_count(config.epochs, "epochs")
    X = np.atleast_2d(X)
    model = init_model(spec, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])

    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, adam_eps = 0.9, 0.999, 1e-8

    curve = []
    for epoch in range(config.epochs):
        eps_noise = rng.standard_normal((X.shape[0], spec.latent_dim))
        beta = spec.beta * config.beta_factor(epoch)
        loss, grads, recon, rate = loss_and_grads(model, X, eps_noise, beta)
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch)

        t = epoch + 1
        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            p -= config.lr * mhat / (np.sqrt(vhat) + adam_eps)

        if epoch % config.eval_every == 0 or epoch == config.epochs - 1:
            curve.append(
                {
                    "epoch": epoch,
                    "loss": loss,
                    "recon": recon,
                    "rate": rate,
                    "au": active_units(model, X),
                }
            )
    return TrainResult(model, curve)


def active_units(model: VaeModel, X, threshold: float = 0.01) -> int:
    """Latent coordinates whose encoder-mean variance across the data
    exceeds the threshold."""
    mu = model.encode_mean(np.atleast_2d(X))
    return int((mu.var(axis=0) > threshold).sum())


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

_SNAPSHOT_FORMAT = "codechannel-vae"
_SNAPSHOT_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.float64).copy()
    return a.reshape(d["shape"])


def snapshot(model: VaeModel, path) -> None:
    """Bit-exact serialization: versioned JSON header, base64 f64 blocks."""
    spec = model.spec
    doc = {
        "format": _SNAPSHOT_FORMAT,
        "version": _SNAPSHOT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "latent_dim": spec.latent_dim,
            "hidden": list(spec.hidden),
            "likelihood": spec.likelihood,
            "vocab": spec.vocab,
            "positions": spec.positions,
            "beta": spec.beta,
        },
        "output_eps": OUTPUT_EPS,
        "enc_weights": [_encode_array(a) for a in model.enc_weights],
        "enc_biases": [_encode_array(a) for a in model.enc_biases],
        "dec_weights": [_encode_array(a) for a in model.dec_weights],
        "dec_biases": [_encode_array(a) for a in model.dec_biases],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def restore(path) -> VaeModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    if doc.get("format") != _SNAPSHOT_FORMAT or doc.get("version") != _SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot format in {path}")
    try:
        s = doc["spec"]
        spec = VaeSpec(
            input_dim=s["input_dim"],
            latent_dim=s["latent_dim"],
            hidden=tuple(s["hidden"]),
            likelihood=s["likelihood"],
            vocab=s["vocab"],
            positions=s["positions"],
            beta=s["beta"],
        )
        model = VaeModel(
            spec,
            [_decode_array(a) for a in doc["enc_weights"]],
            [_decode_array(a) for a in doc["enc_biases"]],
            [_decode_array(a) for a in doc["dec_weights"]],
            [_decode_array(a) for a in doc["dec_biases"]],
        )
    except (KeyError, ValueError) as exc:
        raise SnapshotError(f"malformed snapshot {path}: {exc}") from exc
    _check_shapes(model)
    return model


def _check_shapes(model: VaeModel) -> None:
    spec = model.spec
    dims = [spec.encoder_input_dim, *spec.hidden, 2 * spec.latent_dim]
    for i, W in enumerate(model.enc_weights):
        if W.shape != (dims[i], dims[i + 1]):
            raise SnapshotError(f"encoder layer {i} has shape {W.shape}, expected {(dims[i], dims[i+1])}")
    dims = [spec.latent_dim, *spec.hidden, spec.output_dim]
    for i, W in enumerate(model.dec_weights):
        if W.shape != (dims[i], dims[i + 1]):
            raise SnapshotError(f"decoder layer {i} has shape {W.shape}, expected {(dims[i], dims[i+1])}")
