import time

import numpy as np
import pytest

from codechannel import (
    DecoderCodeMap,
    EncoderCodeMap,
    audit_exact,
    build_grid,
    data_bounds,
    fit_gmm,
    gen_blobs,
    gen_moons,
    grid_posteriors,
    mean_code_agreement,
    save_csv,
    standardize,
)
from codechannel.vae import TrainConfig, VaeSpec, snapshot, train

SWEEP_SEEDS = (0, 1, 2, 3, 4)


def sweep_datasets():
    """Four desk-scale datasets: two moons plus blob stand-ins at tabular
    dimensionalities, features min-max scaled into [0,1]."""
    rng = np.random.default_rng(42)
    raw = {
        "moons": gen_moons(240, noise=0.08, seed=0),
        "digits_like": gen_blobs(300, rng.normal(0.0, 2.2, (10, 8)), sigma=0.7, seed=1),
        "wine_like": gen_blobs(240, rng.normal(0.0, 2.2, (3, 6)), sigma=0.8, seed=2),
        "cancer_like": gen_blobs(240, rng.normal(0.0, 2.2, (2, 8)), sigma=0.9, seed=3),
    }
    return {name: standardize(ds, "minmax") for name, ds in raw.items()}


def build_code_maps(model, X, K, seed=0, restarts=5):
    mu = model.encode_mean(X)
    summary = fit_gmm(mu, K, init_seed=seed, restarts=restarts)
    enc_map = EncoderCodeMap(summary)
    dec_map = DecoderCodeMap.from_decoder(model.decoder_fn(), summary.means())
    return summary, enc_map, dec_map


@pytest.fixture(scope="session")
def audit_sweep(tmp_path_factory):
    """Retrain 4 datasets x 5 seeds x 800 epochs and grid-audit each at
    41x41; shared by the acceptance criteria that reference the sweep."""
    out = tmp_path_factory.mktemp("sweep")
    datasets = sweep_datasets()
    records = []
    start = time.monotonic()
    for name, ds in datasets.items():
        X = ds.features
        K = int(len(np.unique(ds.labels)))
        data_path = out / f"{name}.csv"
        save_csv(ds, data_path)
        spec = VaeSpec(input_dim=X.shape[1], latent_dim=2, hidden=(64, 64), likelihood="bernoulli", beta=1.0)
        for seed in SWEEP_SEEDS:
            result = train(spec, X, TrainConfig(epochs=800, seed=seed))
            model = result.model
            model_path = out / f"{name}_seed{seed}.json"
            snapshot(model, model_path)
            summary, enc_map, dec_map = build_code_maps(model, X, K)
            grid = build_grid(data_bounds(model.encode_mean(X)), 41, weighting="prior")
            posteriors = grid_posteriors(model, X, grid)
            report = audit_exact(posteriors, enc_map, dec_map, model.decode_probs, grid)
            a_mu = mean_code_agreement(model, X, enc_map, dec_map, model.decode_probs)
            records.append(
                {
                    "dataset": name,
                    "seed": seed,
                    "K": K,
                    "report": report,
                    "a_mu": a_mu,
                    "model_path": model_path,
                    "data_path": data_path,
                }
            )
    elapsed = time.monotonic() - start
    return {"records": records, "elapsed_seconds": elapsed}


@pytest.fixture(scope="session")
def toy_bundle():
    """A small grid-enumerable model with enough posterior structure for the
    sampling estimators to have signal; the wide fine grid stands in for the
    continuous law."""
    rng = np.random.default_rng(42)
    ds = standardize(gen_blobs(240, rng.normal(0.0, 2.2, (3, 6)), sigma=0.8, seed=2), "minmax")
    X = ds.features
    spec = VaeSpec(input_dim=6, latent_dim=2, hidden=(32, 32), likelihood="bernoulli", beta=0.2)
    model = train(spec, X, TrainConfig(epochs=400, seed=0)).model
    summary, enc_map, dec_map = build_code_maps(model, X, 3)
    grid = build_grid(data_bounds(model.encode_mean(X), margin=4.0), 161)
    batch = X[:64]
    posteriors = grid_posteriors(model, batch, grid)
    report = audit_exact(posteriors, enc_map, dec_map, model.decode_probs, grid)
    return {
        "model": model,
        "X": X,
        "batch": batch,
        "summary": summary,
        "enc_map": enc_map,
        "dec_map": dec_map,
        "grid": grid,
        "posteriors": posteriors,
        "report": report,
    }
