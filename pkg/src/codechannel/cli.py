"""Command-line orchestration: data generation, training sweeps, grid and
sampling audits, code-granularity sweeps, stress tables, and kernel bound
checks. Every command writes a manifest.json describing exactly what ran.

Exit codes: 0 success, 1 audit/bound check failed, 2 usage or configuration
error, 3 numerical failure (divergence or flagged sentinel).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .channel import JointCodeTable, row_normalize, stress_table, summarize, table_from_pairs
from .codemaps import DecoderCodeMap, EncoderCodeMap, GmmSummary, fit_gmm
from .estimators import heuristic_audit, mc_agreement
from .gibbs import DiscreteJoint, build_kernels, gap_terms, horizon_agreement, one_step_mismatch, path_mismatch
from .gridaudit import audit_exact, build_grid, data_bounds, grid_posteriors, joint_table_from_grid, mean_code_agreement
from .synth import Dataset, gen_blobs, gen_moons, gen_setting1, load_csv, save_csv, standardize
from .vae import TrainConfig, TrainingDiverged, VaeSpec, active_units, restore, snapshot, train

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Manifest plumbing
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict, *, seeds=None, data_path=None, outputs=()):
    manifest = {
        "command": command,
        "params": {k: v for k, v in params.items() if not k.startswith("_")},
        "seeds": seeds,
        "dataset_sha256": _sha256_file(Path(data_path)) if data_path else None,
        "tool_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _load_dataset(path: str) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"data file not found: {p}")
    return load_csv(p)


def _pipeline_features(dataset: Dataset) -> np.ndarray:
    """Model-facing features: tokens pass through, continuous data is
    min-max scaled into [0,1] so the surrogate Bernoulli geometry applies."""
    if dataset.kind == "tokens":
        return dataset.features
    if dataset.kind == "binary":
        return dataset.features.astype(np.float64)
    scaled = standardize(dataset, "minmax")
    return scaled.features


def _spec_for(dataset: Dataset, args) -> VaeSpec:
    hidden = tuple(int(h) for h in str(args.hidden).split(",") if h)
    if dataset.kind == "tokens":
        vocab = int(dataset.metadata.get("vocab", int(dataset.features.max())))
        positions = dataset.features.shape[1]
        return VaeSpec(
            input_dim=positions,
            latent_dim=args.latent_dim,
            hidden=hidden,
            likelihood="categorical",
            vocab=vocab,
            positions=positions,
            beta=args.beta,
        )
    return VaeSpec(
        input_dim=dataset.features.shape[1],
        latent_dim=args.latent_dim,
        hidden=hidden,
        likelihood="bernoulli",
        beta=args.beta,
    )


def _default_k(dataset: Dataset, k_flag) -> int:
    if k_flag:
        return int(k_flag)
    if dataset.labels is not None:
        return int(len(np.unique(dataset.labels)))
    raise UsageError("dataset has no labels; pass --K explicitly")


def _build_code_maps(model, X, K: int, seed: int, fit_on: str, restarts: int):
    """GMM summary of the aggregate posterior plus both code maps."""
    mu = model.encode_mean(X)
    if fit_on == "means":
        latents = mu
    elif fit_on == "samples":
        rng = np.random.default_rng(seed)
        _, logvar = model.encode(X)
        latents = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    else:
        raise UsageError(f"unknown --fit-on value {fit_on!r}")
    summary = fit_gmm(latents, K, init_seed=seed, restarts=restarts)
    enc_map = EncoderCodeMap(summary)
    dec_map = DecoderCodeMap.from_decoder(
        model.decoder_fn(),
        summary.means(),
        generator="categorical" if model.spec.likelihood == "categorical" else "bernoulli",
        positions=model.spec.positions,
    )
    return summary, enc_map, dec_map


def _save_code_maps(path: Path, enc_map, dec_map):
    _write_json(path, {"encoder": enc_map.to_dict(), "decoder": dec_map.to_dict()})


def _load_code_maps(path: Path):
    with open(path) as fh:
        doc = json.load(fh)
    enc_map = EncoderCodeMap.from_dict(doc["encoder"])
    dec_map = DecoderCodeMap.from_dict(doc["decoder"])
    return enc_map.summary, enc_map, dec_map


def _mean_rate(model, X) -> float:
    mu, logvar = model.encode(X)
    return float(np.mean(0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)))


def _full_package(model, X, table: JointCodeTable) -> dict:
    """Channel summary plus rate and active units; agreement is never
    reported on its own."""
    report = summarize(table)
    return {
        "channel": report.to_dict(),
        "rate": _mean_rate(model, X),
        "au": active_units(model, X),
        "training_beta": model.spec.beta,
    }


def _write_channel_csvs(out_dir: Path, table: JointCodeTable, stem: str):
    joint_path = out_dir / f"{stem}_joint.csv"
    table.to_csv(joint_path)
    chan, _ = row_normalize(table)
    chan_path = out_dir / f"{stem}_channel.csv"
    with open(chan_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"dec_{j}" for j in range(1, table.K + 1)])
        for row in chan:
            writer.writerow([repr(v) for v in row])
    return [joint_path, chan_path]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_generate_data(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "moons":
        ds = gen_moons(args.n, noise=args.noise, seed=args.seed)
    elif args.kind == "blobs":
        if not args.centers:
            raise UsageError("blobs needs --centers 'x,y;x,y;...'")
        centers = [[float(v) for v in c.split(",")] for c in args.centers.split(";")]
        ds = gen_blobs(args.n, centers, sigma=args.sigma, seed=args.seed)
    elif args.kind == "setting1":
        ds = gen_setting1(
            args.n,
            k_components=args.k_components,
            vocab=args.vocab,
            positions=args.positions,
            seed=args.seed,
        )
    else:
        raise UsageError(f"unknown data kind {args.kind!r}")
    save_csv(ds, out)
    _write_manifest(
        out.parent,
        "generate-data",
        vars(args),
        seeds=[args.seed],
        data_path=out,
        outputs=[out, out.with_suffix(out.suffix + ".meta.json")],
    )
    print(f"wrote {out} ({ds.n} rows, kind={ds.kind})")
    return EXIT_OK


def _train_one(payload):
    spec, X, config = payload
    try:
        result = train(spec, X, config)
        return config.seed, result, None
    except TrainingDiverged as exc:
        return config.seed, None, f"diverged at epoch {exc.epoch}"


def _cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    X = _pipeline_features(dataset)
    spec = _spec_for(dataset, args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]

    jobs = []
    for seed in seeds:
        config = TrainConfig(
            lr=args.lr,
            epochs=args.epochs,
            seed=seed,
            eval_every=args.eval_every,
            beta_schedule="warmup" if args.warmup_epochs > 0 else "constant",
            warmup_epochs=args.warmup_epochs,
        )
        jobs.append((spec, X, config))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    outputs = []
    seed_records = []
    any_failed = False
    for seed, result, failure in results:
        if failure is not None:
            any_failed = True
            seed_records.append({"seed": seed, "status": "failed", "failure_code": failure})
            continue
        model_path = out_dir / f"vae_seed{seed}.json"
        snapshot(result.model, model_path)
        curve_path = out_dir / f"curve_seed{seed}.csv"
        with open(curve_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "recon", "rate", "au"])
            writer.writeheader()
            writer.writerows(result.curve)
        outputs += [model_path, curve_path]
        seed_records.append({"seed": seed, "status": "ok", "model": str(model_path)})

    _write_manifest(
        out_dir,
        "train",
        vars(args),
        seeds=seed_records,
        data_path=args.data,
        outputs=outputs,
    )
    ok = sum(1 for r in seed_records if r["status"] == "ok")
    print(f"trained {ok}/{len(seeds)} seeds into {out_dir}")
    return EXIT_NUMERICAL if any_failed else EXIT_OK


def _check_kind(model, dataset):
    want = "categorical" if dataset.kind == "tokens" else "bernoulli"
    if model.spec.likelihood != want:
        raise UsageError(
            f"model likelihood {model.spec.likelihood!r} does not match dataset kind {dataset.kind!r}"
        )


def _cmd_audit_grid(args) -> int:
    dataset = _load_dataset(args.data)
    model = restore(args.model)
    _check_kind(model, dataset)
    X = _pipeline_features(dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.codemap:
        summary, enc_map, dec_map = _load_code_maps(Path(args.codemap))
    else:
        K = _default_k(dataset, args.K)
        summary, enc_map, dec_map = _build_code_maps(
            model, X, K, args.seed, args.fit_on, args.restarts
        )
    outputs = []
    if args.save_codemap:
        cm_path = out_dir / "codemaps.json"
        _save_code_maps(cm_path, enc_map, dec_map)
        outputs.append(cm_path)

    mu = model.encode_mean(X)
    if args.bounds:
        bounds = [tuple(float(v) for v in b.split(",")) for b in args.bounds.split(";")]
    else:
        bounds = data_bounds(mu, margin=0.5)
    grid = build_grid(bounds, args.resolution, weighting=args.weighting)

    posteriors = grid_posteriors(model, X, grid)
    report = audit_exact(posteriors, enc_map, dec_map, model.decode_probs, grid)
    report.agreement_mu = mean_code_agreement(model, X, enc_map, dec_map, model.decode_probs)
    a_q_mc, a_q_mc_se = mc_agreement(
        model, X, enc_map, dec_map, model.decode_probs, args.mc_samples, seed=args.seed
    )

    labels_enc = enc_map.predict(grid.points)
    labels_dec = dec_map.predict(model.decode_probs(grid.points))
    table = joint_table_from_grid(posteriors.q.mean(axis=0), labels_enc, labels_dec, summary.K)

    payload = {
        "audit": report.to_dict(include_per_example=False),
        "A_q_mc": a_q_mc,
        "A_q_mc_se": a_q_mc_se,
        **_full_package(model, X, table),
        "grid": {
            "bounds": [list(b) for b in grid.bounds],
            "resolution": list(grid.resolution),
            "weighting": grid.weighting,
        },
        "gmm": {"K": summary.K, "covariance_type": summary.covariance_type},
    }
    report_path = out_dir / "report.json"
    _write_json(report_path, payload)
    per_example_path = out_dir / "per_example.csv"
    report.write_per_example_csv(per_example_path)
    outputs += [report_path, per_example_path]
    outputs += _write_channel_csvs(out_dir, table, "grid")

    _write_manifest(
        out_dir,
        "audit-grid",
        vars(args),
        seeds=[args.seed],
        data_path=args.data,
        outputs=outputs,
    )
    verdict = "valid" if report.validity else "invalid"
    print(f"{verdict}: d_bin={report.d_bin:.6g} <= delta_bar={report.delta_bar:.6g}")
    if report.ac_violation:
        return EXIT_NUMERICAL
    return EXIT_OK if report.validity else EXIT_INVALID


def _cmd_audit_snis(args) -> int:
    dataset = _load_dataset(args.data)
    model = restore(args.model)
    _check_kind(model, dataset)
    X = _pipeline_features(dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    K = _default_k(dataset, args.K)
    summary, enc_map, dec_map = _build_code_maps(
        model, X, K, args.seed, args.fit_on, args.restarts
    )
    result = heuristic_audit(
        model,
        X,
        enc_map,
        dec_map,
        model.decode_probs,
        k_samples=args.k_samples,
        mc_samples=args.mc_samples,
        seed=args.seed,
    )

    # channel package from pooled posterior samples
    rng = np.random.default_rng(args.seed)
    pairs = []
    for n in range(X.shape[0]):
        Z = model.sample_posterior(X[n], args.mc_samples, rng)
        enc = enc_map.predict(Z)
        dec = dec_map.predict(model.decode_probs(Z))
        pairs.append(np.stack([enc, dec], axis=1))
    table = table_from_pairs(np.concatenate(pairs), summary.K)

    payload = {"snis": result, **_full_package(model, X, table)}
    report_path = out_dir / "report.json"
    _write_json(report_path, payload)
    outputs = [report_path] + _write_channel_csvs(out_dir, table, "snis")
    _write_manifest(
        out_dir, "audit-snis", vars(args), seeds=[args.seed], data_path=args.data, outputs=outputs
    )
    print(
        f"heuristic audit: delta_iwae={result['delta_iwae']:.6g}, "
        f"eta_p_snis={result['eta_p_snis']:.6g}, ESS/K={result['ess_over_k']:.3f}"
    )
    return EXIT_OK


def _cmd_sweep_k(args) -> int:
    dataset = _load_dataset(args.data)
    model = restore(args.model)
    _check_kind(model, dataset)
    X = _pipeline_features(dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k_list = [int(k) for k in str(args.k_list).split(",") if k]

    rows = []
    mu = model.encode_mean(X)
    for K in k_list:
        summary, enc_map, dec_map = _build_code_maps(
            model, X, K, args.seed, args.fit_on, args.restarts
        )
        a_mu = mean_code_agreement(model, X, enc_map, dec_map, model.decode_probs)
        enc = enc_map.predict(mu)
        dec = dec_map.predict(model.decode_probs(mu))
        table = table_from_pairs(np.stack([enc, dec], axis=1), K)
        rows.append({"K": K, "A_mu": a_mu, **_full_package(model, X, table)})

    table_path = out_dir / "k_sweep.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["K", "A_mu", "A", "A_matched", "R_eff", "R_eff_norm", "H_enc", "H_dec",
             "active_enc", "active_dec", "rate", "au"]
        )
        for row in rows:
            ch = row["channel"]
            writer.writerow(
                [row["K"], row["A_mu"], ch["A"], ch["A_matched"], ch["R_eff"], ch["R_eff_norm"],
                 ch["H_enc"], ch["H_dec"], ch["active_enc"], ch["active_dec"], row["rate"], row["au"]]
            )
    json_path = out_dir / "k_sweep.json"
    _write_json(json_path, {"rows": rows})
    _write_manifest(
        out_dir, "sweep-k", vars(args), seeds=[args.seed], data_path=args.data,
        outputs=[table_path, json_path],
    )
    print(f"swept K in {k_list}; table at {table_path}")
    return EXIT_OK


def _cmd_stress(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    K = args.K
    weights = None
    if args.weights:
        weights = [float(w) for w in args.weights.split(",")]

    if args.kind == "derangement":
        pair = [("identity", stress_table("identity", K)), ("derangement", stress_table("derangement", K))]
    elif args.kind == "weighted_permutation":
        if weights is None:
            raise UsageError("weighted_permutation needs --weights")
        pair = [
            ("weighted_identity", stress_table("weighted_identity", K, weights=weights)),
            ("weighted_permutation", stress_table("weighted_permutation", K, weights=weights)),
        ]
    else:
        pair = [(args.kind, stress_table(args.kind, K, weights=weights))]

    outputs = []
    summaries = {}
    for name, table in pair:
        outputs += _write_channel_csvs(out_dir, table, name)
        summaries[name] = summarize(table).to_dict()
    report_path = out_dir / "stress.json"
    _write_json(report_path, {"kind": args.kind, "K": K, "summaries": summaries})
    outputs.append(report_path)
    _write_manifest(out_dir, "stress", vars(args), outputs=outputs)
    for name, summ in summaries.items():
        print(f"{name}: A={summ['A']:.3f} R_eff={summ['R_eff']:.4f} H_enc={summ['H_enc']:.4f}")
    return EXIT_OK


def _cmd_gibbs(args) -> int:
    dataset = _load_dataset(args.data)
    model = restore(args.model)
    _check_kind(model, dataset)
    X = _pipeline_features(dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    K = _default_k(dataset, args.K)
    summary, enc_map, dec_map = _build_code_maps(
        model, X, K, args.seed, args.fit_on, args.restarts
    )
    mu = model.encode_mean(X)
    grid = build_grid(data_bounds(mu, margin=0.5), args.resolution, weighting=args.weighting)
    posteriors = grid_posteriors(model, X, grid)
    if posteriors.ac_violation.any():
        print("absolute-continuity violation on grid", file=sys.stderr)
        return EXIT_NUMERICAL

    n = posteriors.n_examples
    px = np.full(n, 1.0 / n)
    q_joint = DiscreteJoint.from_conditionals(px, posteriors.q / posteriors.q.sum(axis=1, keepdims=True))
    p_joint = DiscreteJoint.from_conditionals(px, posteriors.p / posteriors.p.sum(axis=1, keepdims=True))
    k_q, k_p = build_kernels(q_joint, p_joint)
    delta_bar, kl_marginals = gap_terms(q_joint, p_joint)

    one = one_step_mismatch(k_q, k_p, q_joint.z_marginal, delta_bar, kl_marginals)
    path = path_mismatch(k_q, k_p, q_joint.z_marginal, args.horizon, delta_bar, kl_marginals)
    labels_enc = enc_map.predict(grid.points)
    labels_dec = dec_map.predict(model.decode_probs(grid.points))
    horizon = horizon_agreement(
        k_q, k_p, q_joint.z_marginal, labels_enc, labels_dec, args.horizon, delta_bar, kl_marginals
    )

    payload = {
        "delta_bar": delta_bar,
        "kl_marginals": kl_marginals,
        "one_step": one.to_dict(),
        "path": path.to_dict(),
        "horizon_agreement": horizon.to_dict(),
        "grid_size": grid.size,
    }
    report_path = out_dir / "gibbs.json"
    _write_json(report_path, payload)
    outputs = [report_path]
    if grid.size <= 200:
        for name, kern in (("kernel_q", k_q), ("kernel_p", k_p)):
            p = out_dir / f"{name}.csv"
            np.savetxt(p, kern.matrix, delimiter=",")
            outputs.append(p)
    _write_manifest(
        out_dir, "gibbs", vars(args), seeds=[args.seed], data_path=args.data, outputs=outputs
    )
    all_ok = one.satisfied and path.satisfied and horizon.satisfied
    print(
        f"one-step {'ok' if one.satisfied else 'FAIL'} "
        f"({one.lhs:.6g} <= {one.bound:.6g}); "
        f"path H={args.horizon} {'ok' if path.satisfied else 'FAIL'}; "
        f"endpoint {'ok' if horizon.satisfied else 'FAIL'}"
    )
    return EXIT_OK if all_ok else EXIT_INVALID


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_model_data_args(p, with_k=True):
    p.add_argument("--model", required=True, help="model snapshot JSON")
    p.add_argument("--data", required=True, help="dataset CSV (with sidecar)")
    if with_k:
        p.add_argument("--K", type=int, default=0, help="code count (default: class count from labels)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fit-on", default="means", choices=["means", "samples"],
                   help="latents used to fit the GMM summary")
    p.add_argument("--restarts", type=int, default=5, help="GMM EM restarts")
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codechannel",
        description="Coupled codebook-channel diagnostics and variational audit certificates for small VAEs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset CSV + metadata sidecar")
    p.add_argument("--kind", required=True, choices=["moons", "blobs", "setting1"])
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.1, help="moons noise sigma")
    p.add_argument("--centers", default="", help="blobs centers 'x,y;x,y;...'")
    p.add_argument("--sigma", type=float, default=0.5, help="blobs noise sigma")
    p.add_argument("--k-components", type=int, default=10, help="setting1 mixture size")
    p.add_argument("--vocab", type=int, default=16, help="setting1 token vocabulary")
    p.add_argument("--positions", type=int, default=8, help="setting1 token positions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train one VAE per seed; failures get failure codes")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, default=800)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--warmup-epochs", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("audit-grid", help="finite-grid exact certificate audit")
    _add_model_data_args(p)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--weighting", default="prior", choices=["prior", "uniform"])
    p.add_argument("--bounds", default="", help="grid box 'lo,hi;lo,hi' (default: data-driven)")
    p.add_argument("--mc-samples", type=int, default=64, help="posterior samples for the side-by-side A_q estimate")
    p.add_argument("--codemap", default="", help="load code maps from JSON instead of fitting")
    p.add_argument("--save-codemap", action="store_true")
    p.set_defaults(func=_cmd_audit_grid)

    p = sub.add_parser("audit-snis", help="sampling-based heuristic audit")
    _add_model_data_args(p)
    p.add_argument("--k-samples", type=int, default=100)
    p.add_argument("--mc-samples", type=int, default=32)
    p.set_defaults(func=_cmd_audit_snis)

    p = sub.add_parser("sweep-k", help="refit code maps across K and tabulate the package")
    _add_model_data_args(p, with_k=False)
    p.add_argument("--k-list", default="2,3,4,5,6")
    p.set_defaults(func=_cmd_sweep_k)

    p = sub.add_parser("stress", help="emit analytic stress tables and their summaries")
    p.add_argument("--kind", required=True,
                   choices=["identity", "derangement", "many_to_one", "collapse", "weighted_permutation"])
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--weights", default="", help="probability vector 'w1,w2,...' for weighted kinds")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_stress)

    p = sub.add_parser("gibbs", help="posterior-Gibbs kernel bound checks on a grid")
    _add_model_data_args(p)
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--weighting", default="prior", choices=["prior", "uniform"])
    p.add_argument("--horizon", type=int, default=4)
    p.set_defaults(func=_cmd_gibbs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
