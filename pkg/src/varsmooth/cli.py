"""Command-line surface for the library.

Verbs: generate, train, infer, forecast, benchmark, gradcheck, metrics.
This module owns argument parsing, file layout, and plot-data CSV emission;
all numeric work is delegated. Heavy imports happen inside the handlers so
--help stays fast and VARSMOOTH_THREADS can take effect before the numerics
stack spins up.

Plot emission is data-only: training writes curve.csv, benchmark writes the
scaling table, infer/forecast write trajectory overlay CSVs. Rendering is up
to the caller.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys


def _apply_thread_env() -> None:
    """Honors VARSMOOTH_THREADS before any numeric backend initializes."""
    n = os.environ.get("VARSMOOTH_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)
    flags = os.environ.get("XLA_FLAGS", "")
    if "intra_op_parallelism_threads" not in flags:
        multi = "false" if n.strip() == "1" else "true"
        os.environ["XLA_FLAGS"] = (
            f"{flags} --xla_cpu_multi_thread_eigen={multi}"
            f" intra_op_parallelism_threads={n}"
        ).strip()


def _add_common(p, out_help):
    p.add_argument("-c", "--config", default=None, help="TOML experiment config")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed; overrides the config seed")
    p.add_argument("--out", default=None, help=out_help)


def _load_cfg(args):
    from .config import load_config

    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    from . import datasets

    cfg = _load_cfg(args)
    ds = datasets.generate(cfg.generator, cfg.seed)
    out = args.out or "dataset.vsm"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    datasets.save_dataset(out, ds)
    print(f"wrote {ds.n_sequences} sequences (T={ds.T}, N={ds.obs_dim}, "
          f"kind={cfg.generator.kind}, seed={cfg.seed}) to {out}")
    return 0


# ------------------------------------------------------------------- train

def cmd_train(args) -> int:
    import jax

    from . import datasets, params, trainer
    from .config import build_model, config_dict

    cfg = _load_cfg(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.data:
        ds = datasets.load_dataset(args.data)
    else:
        ds = datasets.generate(cfg.generator, cfg.seed)
        datasets.save_dataset(os.path.join(cfg.out_dir, "dataset.vsm"), ds)
    model = build_model(cfg.model, ds.obs_dim, jax.random.PRNGKey(cfg.seed))
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        json.dump(config_dict(cfg), fh, indent=2)
    model, trace = trainer.fit(model, ds.ys, cfg.train, missing=ds.missing,
                               out_dir=cfg.out_dir)
    params.save_checkpoint(os.path.join(cfg.out_dir, "model.ckpt"), model,
                           extra_meta={"epochs": cfg.train.epochs,
                                       "seed": cfg.seed})
    final = trace[-1]["elbo"] if trace else float("nan")
    print(f"trained {cfg.train.epochs} epochs (variant={cfg.train.variant}), "
          f"final elbo {final:.6g}, artifacts in {cfg.out_dir}")
    return 0


# ------------------------------------------------------------------- infer

def _sequence_pass(model, y, missing, S, key, mode, heldout_dims=()):
    """One inference pass; mode 'smooth' or 'filter' picks the recursion.

    heldout_dims are zeroed in the encoder input, so the state is inferred
    from the remaining dims only (the readout still predicts all of them).
    """
    import jax.numpy as jnp

    from . import encoders, smoother, trainer

    T = y.shape[0]
    p = model.params
    if heldout_dims:
        y = y.at[:, jnp.asarray(heldout_dims)].set(0.0)
    if mode == "smooth":
        noise = trainer.draw_noise(model, T, S, key, "smooth")
        kk, KK = encoders.pseudo_obs_seq(model.enc_cfg, p["encoder"], y,
                                         mask_local=missing)
        return smoother.variational_filter(model.dyn_cfg, p["dynamics"],
                                           kk, KK, noise)
    noise = trainer.draw_noise(model, T, S, key, "realtime")
    a, A = encoders.encode_local_seq(model.enc_cfg, p["encoder"], y, missing)
    b, B = encoders.encode_backward(model.enc_cfg, p["encoder"], a, A)
    return smoother.realtime_filter(model.dyn_cfg, p["dynamics"],
                                    a, A, b, B, noise)


def _trajectory_rows(t_count, mean, var, y, pred):
    header = ["t"]
    header += [f"z{j}_mean" for j in range(mean.shape[1])]
    header += [f"z{j}_var" for j in range(var.shape[1])]
    header += [f"y{k}" for k in range(y.shape[1])]
    header += [f"y{k}_pred" for k in range(pred.shape[1])]
    rows = [
        [t, *mean[t], *var[t], *y[t], *pred[t]]
        for t in range(t_count)
    ]
    return header, rows


def cmd_infer(args) -> int:
    import jax
    import jax.numpy as jnp
    import numpy as np

    from . import container, datasets, likelihoods, params, smoother

    model, _, _ = params.load_checkpoint(args.ckpt)
    ds = datasets.load_dataset(args.data)
    heldout = ()
    if args.heldout_dims:
        heldout = tuple(int(tok) for tok in args.heldout_dims.split(",")
                        if tok.strip())
        if heldout and not 0 <= min(heldout) <= max(heldout) < ds.obs_dim:
            raise ValueError(f"--heldout-dims {heldout} out of range for "
                             f"{ds.obs_dim} observation dims")
    base = jax.random.PRNGKey(args.seed)
    means, variances, samples, preds = [], [], [], []
    for i in range(ds.n_sequences):
        key = jax.random.fold_in(base, i)
        pass_ = _sequence_pass(model, jnp.asarray(ds.ys[i]),
                               jnp.asarray(ds.missing[i]), args.samples, key,
                               args.mode, heldout)
        if args.mode == "filter":
            m, v = smoother.filtered_marginals(pass_)
            smp = pass_.filt_samples
        else:
            m, v = smoother.posterior_marginals(pass_)
            smp = pass_.samples
        means.append(np.asarray(m))
        variances.append(np.asarray(v))
        samples.append(np.asarray(smp))
        preds.append(np.asarray(likelihoods.predict_obs(
            model.lik_cfg, model.params["likelihood"], smp)))
    arrays = {
        "means": np.stack(means), "variances": np.stack(variances),
        "samples": np.stack(samples), "pred_obs": np.stack(preds),
    }
    meta = {"kind": "inference", "mode": args.mode, "seed": args.seed,
            "num_samples": args.samples, "heldout_dims": list(heldout)}
    out = args.out or "infer.vsm"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    container.write_container(out, meta, arrays)

    i = args.seq
    if not 0 <= i < ds.n_sequences:
        raise ValueError(f"--seq {i} out of range for {ds.n_sequences} sequences")
    header, rows = _trajectory_rows(ds.T, arrays["means"][i],
                                    arrays["variances"][i], ds.ys[i],
                                    arrays["pred_obs"][i])
    csv_path = os.path.splitext(out)[0] + f"_seq{i}.csv"
    _write_csv(csv_path, header, rows)
    print(f"{args.mode} pass over {ds.n_sequences} sequences -> {out} "
          f"(overlay: {csv_path})")
    return 0


# ---------------------------------------------------------------- forecast

def cmd_forecast(args) -> int:
    import jax
    import jax.numpy as jnp
    import numpy as np

    from . import container, datasets, likelihoods, metrics, params, smoother

    model, _, _ = params.load_checkpoint(args.ckpt)
    ds = datasets.load_dataset(args.data)
    T0 = args.condition if args.condition is not None else ds.T
    if not 1 <= T0 <= ds.T:
        raise ValueError(f"--condition {T0} outside 1..{ds.T}")
    H = args.horizon
    L = model.dyn_cfg.state_dim
    S = args.samples
    r = model.enc_cfg.r_alpha + model.enc_cfg.r_beta
    base = jax.random.PRNGKey(args.seed)

    state_means, state_vars, pred_obs = [], [], []
    for i in range(ds.n_sequences):
        key = jax.random.fold_in(base, i)
        pass_ = _sequence_pass(model, jnp.asarray(ds.ys[i, :T0]),
                               jnp.asarray(ds.missing[i, :T0]), S, key,
                               "smooth")
        post = jax.tree_util.tree_map(lambda a: a[-1], pass_.posts)
        fk = jax.random.fold_in(key, 1_000_003)
        k1, k2, k3 = jax.random.split(fk, 3)
        fc = smoother.forecast(
            model.dyn_cfg, model.params["dynamics"], post, H,
            zbar_noise=jax.random.normal(k1, (L + S, S)),
            w_noise=jax.random.normal(k2, (r, S)),
            step_noise=jax.random.normal(k3, (H, L, S)),
        )
        mean = np.array(fc.mean)
        var = np.array(fc.std) ** 2
        # horizon 0 is the smoothed state itself; restate the pass output
        # instead of re-estimating it from fresh draws
        pm, pv = smoother.posterior_marginals(pass_)
        mean[0] = np.asarray(pm[-1])
        var[0] = np.asarray(pv[-1])
        stack = np.array(fc.samples)
        stack[0] = np.asarray(pass_.samples[-1])
        obs = np.asarray(likelihoods.predict_obs(
            model.lik_cfg, model.params["likelihood"], stack))
        state_means.append(mean)
        state_vars.append(var)
        pred_obs.append(obs)

    arrays = {
        "state_mean": np.stack(state_means),   # (n, H+1, L)
        "state_var": np.stack(state_vars),
        "pred_obs": np.stack(pred_obs),        # (n, H+1, N)
    }
    meta = {"kind": "forecast", "horizon": H, "condition": T0,
            "seed": args.seed, "num_samples": S}
    out = args.out or "forecast.vsm"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    container.write_container(out, meta, arrays)
    print(f"forecast horizon {H} from step {T0} over {ds.n_sequences} "
          f"sequences -> {out}")

    if T0 + H <= ds.T:
        actual = ds.ys[:, T0 - 1: T0 + H]  # horizon h lives at step T0-1+h
        per_h = metrics.forecast_metrics(arrays["pred_obs"], actual)
        csv_path = os.path.splitext(out)[0] + "_metrics.csv"
        _write_csv(csv_path, ["horizon", "mse", "r2"],
                   [[m.horizon, m.mse, m.r2] for m in per_h])
        last = per_h[-1]
        print(f"horizon {last.horizon}: mse {last.mse:.6g}, r2 {last.r2:.4f} "
              f"(per-horizon table: {csv_path})")
    else:
        print("ground truth ends before the horizon; skipping error table")
    return 0


# --------------------------------------------------------------- benchmark

def _parse_dims(text):
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def cmd_benchmark(args) -> int:
    from . import benchmark

    cfg = benchmark.ScalingConfig(
        structured_dims=_parse_dims(args.dims),
        dense_dims=_parse_dims(args.dense_dims),
        num_samples=args.samples, rank=args.rank, T=args.T,
        repeats=args.repeats, seed=args.seed or 0,
    )
    rows = benchmark.run_scaling(cfg)
    out = args.out or "scaling.csv"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    benchmark.write_csv(rows, out)
    for row in rows:
        print(f"{row['path']:>10}  L={row['L']:<5d} {row['seconds']:.4f}s")
    for path, slope in benchmark.slopes(rows).items():
        print(f"{path} log-log slope: {slope:.3f}")
    print(f"scaling table -> {out}")
    return 0


# --------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    import jax
    import numpy as np

    from . import datasets, params, trainer
    from .config import build_model

    cfg = _load_cfg(args)
    if args.data:
        ds = datasets.load_dataset(args.data)
    else:
        ds = datasets.generate(cfg.generator, cfg.seed)
    B = min(args.sequences, ds.n_sequences)
    T = min(args.steps, ds.T)
    ys = ds.ys[:B, :T]
    missing = ds.missing[:B, :T]
    if args.ckpt:
        model, _, _ = params.load_checkpoint(args.ckpt)
    else:
        model = build_model(cfg.model, ds.obs_dim, jax.random.PRNGKey(cfg.seed))
    S = cfg.train.num_samples
    keys = jax.vmap(lambda i: jax.random.fold_in(jax.random.PRNGKey(cfg.seed), i))(
        np.arange(B))
    noise = trainer.batch_noise(model, T, S, keys, cfg.train.variant)
    batch = trainer.make_batch(ys, missing=missing, noise=noise)
    report = trainer.gradcheck(model, batch, variant=cfg.train.variant,
                               eps=args.eps,
                               max_coords_per_block=args.max_coords,
                               seed=cfg.seed)
    print(trainer.format_gradreport(report))
    if report.max_rel_err > args.tol:
        print(f"error: gradient check failed: max relative error "
              f"{report.max_rel_err:.3e} exceeds {args.tol:.1e}",
              file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------------------- metrics

def cmd_metrics(args) -> int:
    import numpy as np

    from . import container, datasets, metrics

    ds = datasets.load_dataset(args.data)
    report = {}
    meta, arrays = container.read_container(args.infer)
    if meta.get("kind") not in ("inference", "forecast"):
        raise ValueError(f"{args.infer} is not an inference or forecast file")

    if ds.latents is not None and "means" in arrays:
        r2 = metrics.alignment_r2(arrays["means"], ds.latents)
        report["alignment_r2"] = r2
        print(f"latent alignment R^2: {r2:.4f}")

    lik_kind = ds.meta.get("likelihood")
    if lik_kind == "poisson" and "pred_obs" in arrays and meta.get("kind") == "inference":
        if args.heldout_dims:
            dims = [int(tok) for tok in args.heldout_dims.split(",") if tok.strip()]
        else:
            dims = list(range(ds.obs_dim))
        counts = ds.ys[..., dims]
        rates = np.asarray(arrays["pred_obs"])[..., dims]
        cb = metrics.co_bps(counts, rates)
        report["co_bps"] = {
            "value": cb.value if cb.defined else None,
            "defined": cb.defined,
            "total_spikes": cb.total_spikes,
            "dims": dims,
        }
        if cb.defined:
            print(f"co-bps over dims {dims}: {cb.value:.4f} "
                  f"({cb.total_spikes:.0f} spikes)")
        else:
            print(f"co-bps over dims {dims}: undefined (no spikes)")

    if not report:
        print("nothing to score: dataset has no latents and no Poisson dims")
    if args.out:
        if os.path.dirname(args.out):
            os.makedirs(os.path.dirname(args.out), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"metrics -> {args.out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varsmooth",
        description="structured variational smoothing for state-space models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset")
    _add_common(p, "dataset file to write (default dataset.vsm)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a model")
    _add_common(p, "run directory (default from config)")
    p.add_argument("--data", default=None, help="dataset file; generated if absent")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="posterior marginals for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("smooth", "filter"), default="smooth")
    p.add_argument("--samples", type=int, default=8, help="posterior draws per step")
    p.add_argument("--seq", type=int, default=0, help="sequence for the overlay CSV")
    p.add_argument("--heldout-dims", default=None,
                   help="comma-separated observation dims hidden from the encoder")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output container (default infer.vsm)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("forecast", help="roll the model forward from a smoothed state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--condition", type=int, default=None,
                   help="conditioning length (default: full sequence)")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output container (default forecast.vsm)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("benchmark", help="structured vs dense wall-time scaling")
    p.add_argument("--dims", default="64,256,1024,4096",
                   help="state dims for the structured path")
    p.add_argument("--dense-dims", default="64,256,1024",
                   help="state dims for the dense baseline")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV to write (default scaling.csv)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    _add_common(p, "(unused)")
    p.add_argument("--ckpt", default=None, help="check a trained model instead of a fresh one")
    p.add_argument("--data", default=None, help="dataset file; generated if absent")
    p.add_argument("--sequences", type=int, default=2)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--max-coords", type=int, default=60)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", help="score an inference or forecast output")
    p.add_argument("--data", required=True)
    p.add_argument("--infer", required=True, help="inference or forecast container")
    p.add_argument("--heldout-dims", default=None,
                   help="comma-separated observation dims for co-bps")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - the CLI boundary
        from .errors import VarsmoothError

        if isinstance(err, (VarsmoothError, OSError, ValueError)):
            print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
