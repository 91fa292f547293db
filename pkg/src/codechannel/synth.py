"""Deterministic synthetic datasets (two moons, Gaussian blob stand-ins for
small tabular sets, and the lattice-GMM token generator) plus CSV I/O with a
JSON metadata sidecar.

Identical (kind, parameters, seed) always reproduce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .validation import check_count


@dataclass(frozen=True)
class Dataset:
    """Feature table plus generator provenance.

    ``kind`` is ``continuous``, ``binary``, or ``tokens`` (integer columns
    in 1..V with (V, L) recorded in metadata).
    """

    features: np.ndarray = field(repr=False)
    kind: str
    labels: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gen_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles with isotropic Gaussian noise."""
    check_count(n, "n", minimum=2)
    n_outer = n - n // 2
    n_inner = n // 2
    t_outer = np.linspace(0.0, math.pi, n_outer)
    t_inner = np.linspace(0.0, math.pi, n_inner)
    pts = np.concatenate(
        [
            np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1),
            np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1),
        ]
    )
    labels = np.concatenate([np.ones(n_outer, dtype=np.int64), np.full(n_inner, 2, dtype=np.int64)])
    rng = np.random.default_rng(seed)
    pts = pts + noise * rng.standard_normal(pts.shape)
    return Dataset(
        features=pts,
        kind="continuous",
        labels=labels,
        metadata={"generator": "moons", "n": n, "noise": noise, "seed": seed},
    )


def gen_blobs(n: int, centers, sigma: float = 0.5, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs with near-equal class sizes."""
    check_count(n, "n")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.size == 0:
        raise ValueError("centers must be non-empty")
    C = centers.shape[0]
    sizes = [n // C + (1 if i < n % C else 0) for i in range(C)]
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    for i, size in enumerate(sizes):
        parts.append(centers[i] + sigma * rng.standard_normal((size, centers.shape[1])))
        labels.append(np.full(size, i + 1, dtype=np.int64))
    return Dataset(
        features=np.concatenate(parts),
        kind="continuous",
        labels=np.concatenate(labels),
        metadata={
            "generator": "blobs",
            "n": n,
            "centers": centers.tolist(),
            "sigma": sigma,
            "seed": seed,
        },
    )


def _lattice(k: int) -> np.ndarray:
    root = int(round(math.sqrt(k)))
    if root * root == k:
        a, b = root, root
    else:
        a = next(d for d in range(root, 0, -1) if k % d == 0)
        b = k // a
        a, b = max(a, b), min(a, b)
    xs, ys = np.meshgrid(np.arange(a, dtype=np.float64), np.arange(b, dtype=np.float64), indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return centers - centers.mean(axis=0)


def gen_setting1(
    n: int,
    k_components: int = 10,
    sigma_star2: float = 0.04,
    sigma_tok2: float = 0.01,
    vocab: int = 16,
    positions: int = 8,
    seed: int = 0,
) -> Dataset:
    """Token dataset from a planar lattice GMM: draw a latent point, add
    token noise, project onto ``positions`` random orthonormal directions,
    and bin each projection into ``vocab`` uniform-quantile bins.

    The projection basis and quantile edges are stored in metadata so the
    tokens can be related back to the generating latents.
    """
    check_count(n, "n", minimum=vocab)
    centers = _lattice(check_count(k_components, "k_components", minimum=2))
    rng = np.random.default_rng(seed)
    comp = rng.integers(k_components, size=n)
    z_star = centers[comp] + math.sqrt(sigma_star2) * rng.standard_normal((n, 2))
    z_noisy = z_star + math.sqrt(sigma_tok2) * rng.standard_normal((n, 2))
    basis, _ = np.linalg.qr(rng.standard_normal((positions, 2)))
    proj = z_noisy @ basis.T

    tokens = np.empty((n, positions), dtype=np.int64)
    edges = []
    qs = np.arange(1, vocab) / vocab
    for pos in range(positions):
        e = np.quantile(proj[:, pos], qs)
        edges.append(e.tolist())
        tokens[:, pos] = np.searchsorted(e, proj[:, pos], side="right") + 1
    return Dataset(
        features=tokens,
        kind="tokens",
        labels=comp.astype(np.int64) + 1,
        metadata={
            "generator": "setting1",
            "n": n,
            "k_components": k_components,
            "sigma_star2": sigma_star2,
            "sigma_tok2": sigma_tok2,
            "vocab": vocab,
            "positions": positions,
            "seed": seed,
            "lattice": centers.tolist(),
            "basis": basis.tolist(),
            "quantile_edges": edges,
            "latents": z_star.tolist(),
        },
    )


def standardize(dataset: Dataset, method: str = "zscore") -> Dataset:
    """Feature standardization with the transform recorded in metadata.

    ``zscore`` centers/scales; ``minmax`` maps each column into [0, 1]
    (constant columns map to 0.5).
    """
    if dataset.kind == "tokens":
        raise ValueError("token datasets are not standardized")
    X = dataset.features
    if method == "zscore":
        loc = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        out = (X - loc) / scale
    elif method == "minmax":
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        out = (X - lo) / span
        out[:, hi == lo] = 0.5
    else:
        raise ValueError(f"unknown standardization {method!r}")
    meta = dict(dataset.metadata)
    meta["standardization"] = {
        "method": method,
        "param_a": (loc if method == "zscore" else lo).tolist(),
        "param_b": (scale if method == "zscore" else hi).tolist(),
    }
    return replace(dataset, features=out, metadata=meta)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def save_csv(dataset: Dataset, path) -> None:
    """Feature CSV (repr-formatted, so floats round-trip exactly) plus a
    ``<path>.meta.json`` sidecar with kind, labels, and metadata."""
    path = Path(path)
    is_tokens = dataset.kind == "tokens"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.dim)])
        for row in dataset.features:
            writer.writerow([str(int(v)) if is_tokens else repr(float(v)) for v in row])
    sidecar = {
        "kind": dataset.kind,
        "labels": None if dataset.labels is None else dataset.labels.tolist(),
        "metadata": dataset.metadata,
    }
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_csv(path, kind: str | None = None) -> Dataset:
    """Read a dataset CSV; the sidecar restores kind/labels/metadata when
    present, otherwise ``kind`` must be given."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".meta.json")
    labels = None
    metadata: dict = {}
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
        kind = sidecar["kind"]
        labels = None if sidecar["labels"] is None else np.asarray(sidecar["labels"], dtype=np.int64)
        metadata = sidecar["metadata"]
    elif kind is None:
        raise ValueError(f"no sidecar next to {path}; pass kind explicitly")

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: empty file")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                rows.append([int(v) if kind == "tokens" else float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    dtype = np.int64 if kind == "tokens" else np.float64
    return Dataset(
        features=np.asarray(rows, dtype=dtype),
        kind=kind,
        labels=labels,
        metadata=metadata,
    )
