"""Command-line front end: each experiment is a subcommand emitting files.

Subcommands: cov-heatmap, depth-gap, mvg-check, uat-demo, train,
prior-density. Every subcommand reads an optional JSON config (unknown keys
rejected), applies --set overrides, writes the resolved config next to its
outputs, and is byte-reproducible given (config, seed, --jobs 1). The output
directory defaults to $MFDL_OUT, then ./mfdl_out.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derived_rng
from .data_io import (
    gaussian_blobs,
    load_csv_labeled,
    load_idx,
    toy_sine,
    two_moons,
    write_histogram_csv,
    write_json,
    write_matrix_csv,
    write_ppm_heatmap,
    write_sidecar,
)
from .linear_analysis import MVGFactors, cov_product, mc_mvg_moments, mc_product_moments, mvg_product, prior_element_density
from .local_analysis import empirical_cov, sample_local_products
from .mfvi import MeanFieldPosterior, PriorSpec, TrainConfig, train
from .model_core import ActivationSpec, NetworkSpec
from .posterior_geometry import HMCConfig, depth_gap_sweep, gmm_bic_select
from .uat_lab import (
    TargetPredictive,
    assemble_posterior,
    build_rv_introducer,
    fit_rv_mapper,
    induced_vs_target_ks,
    quantile_map,
)


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "cov-heatmap": {
        "seed": 0,
        "mode": "linear-analytic",  # linear-analytic | linear-trained | local-trained
        "depth": 5,  # number of weight layers
        "width": 16,
        "alpha": 0.1,  # negative slope for the local mode
        "dataset": {
            "name": "blobs",
            "n": 2000,
            "dim": 16,
            "classes": 10,
            "sep": 3.0,
            "noise_std": 0.0,
            "seed": 0,
            "images": "",
            "labels": "",
            "path": "",
        },
        "train": {
            "learning_rate": 1e-3,
            "batch_size": 64,
            "epochs": 10,
            "n_train_samples": 16,
            "temperature": 1.0,
        },
        "prior_std": 0.23,
        "n_cov_samples": 10000,
        "anchor_index": 0,
        "flag_entries": 20,
    },
    "depth-gap": {
        "seed": 0,
        "depths": [1, 3, 5],
        "budget": 1000,
        "restarts": 5,
        "activation": "relu",
        "alpha": 0.1,
        "dataset": {"n": 500, "noise_std": 0.0, "seed": 0},
        "test_n": 1000,
        "test_seed": 1,
        "prior_precision": 1.0,
        "hmc": {
            "step_size": 0.01,
            "n_leapfrog": 100,
            "n_burnin": 150,
            "burnin_leapfrog": 40,
            "target_accept": 0.8,
            "n_samples": None,
        },
        "mfvi": {
            "learning_rate": 1e-3,
            "batch_size": 250,
            "epochs": 200,
            "n_train_samples": 2,
        },
    },
    "mvg-check": {
        "seed": 0,
        "sets": 3,
        "n": 100000,
        "max_dim": 3,
        "tolerance_se": 5.0,
    },
    "uat-demo": {
        "seed": 0,
        "target": [[0.5, -2.0, 0.5], [0.5, 2.0, 0.5]],  # (weight, mean, std) rows
        "width": 256,
        "weight_std": 1e-3,
        "sigma_intro": 1e-3,
        "n": 10000,
        "anchor": [1.0],
        "bins": 200,
    },
    "train": {
        "seed": 0,
        "widths": [2, 16, 16, 2],
        "activation": "leaky_relu",
        "alpha": 0.1,
        "bias": True,
        "prior_std": 0.23,
        "dataset": {
            "name": "two_moons",
            "n": 500,
            "dim": 16,
            "classes": 10,
            "sep": 3.0,
            "noise_std": 0.0,
            "seed": 0,
            "images": "",
            "labels": "",
            "path": "",
        },
        "train": {
            "learning_rate": 1e-3,
            "batch_size": 64,
            "epochs": 10,
            "n_train_samples": 16,
            "temperature": 1.0,
            "likelihood": "categorical",
            "noise_scale": 0.05,
        },
    },
    "prior-density": {
        "seed": 0,
        "depths": [1, 2, 3, 4, 5, 6, 7],
        "width": 16,
        "sigma": 0.23,
        "n": 100000,
        "bins": 200,
        "range": [-1.5, 1.5],
    },
}


def _merge_config(defaults: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_config(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def resolve_config(command: str, config_path, seed, assignments) -> dict:
    config = copy.deepcopy(DEFAULTS[command])
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _merge_config(config, loaded)
    for assignment in assignments or []:
        _apply_set(config, assignment)
    if seed is not None:
        config["seed"] = seed
    return config


def _activation(name: str, alpha: float) -> ActivationSpec:
    if name == "leaky_relu":
        return ActivationSpec("leaky_relu", alpha)
    return ActivationSpec(name)


def _make_dataset(cfg: dict):
    name = cfg.get("name", "two_moons")
    if name == "two_moons":
        return two_moons(cfg["n"], cfg.get("noise_std", 0.0), cfg["seed"])
    if name == "blobs":
        return gaussian_blobs(cfg["n"], cfg["dim"], cfg["classes"], cfg["sep"], cfg["seed"])
    if name == "toy_sine":
        return toy_sine(cfg["seed"])
    if name == "idx":
        return load_idx(cfg["images"], cfg["labels"])
    if name == "csv":
        return load_csv_labeled(cfg["path"])
    raise ConfigError(f"unknown dataset {name!r}")


def _heatmap_metrics(flat: np.ndarray) -> dict:
    diag = np.diag(flat)
    off = flat.copy()
    np.fill_diagonal(off, 0.0)
    return {
        "max_diag": float(np.max(np.abs(diag))),
        "max_offdiag": float(np.max(np.abs(off))),
    }


def cmd_cov_heatmap(config: dict, out: Path, jobs: int) -> int:
    mode = config["mode"]
    if mode not in ("linear-analytic", "linear-trained", "local-trained"):
        raise ConfigError(f"unknown mode {config['mode']!r}")
    depth = int(config["depth"])
    width = int(config["width"])
    data = _make_dataset(config["dataset"])
    act = _activation("linear" if mode.startswith("linear") else "leaky_relu", config["alpha"])
    widths = (data.dim, *([width] * (depth - 1)), data.n_classes)
    spec = NetworkSpec(widths, act)
    tc = TrainConfig(seed=config["seed"], **config["train"])
    q = train(spec, data, PriorSpec(config["prior_std"]), tc)

    if mode == "linear-analytic":
        moments = cov_product(q.weight_layers())
        mean, flat = moments.mean, moments.cov.flat_matrix()
        flags = {}
    elif mode == "linear-trained":
        mean, cov, _, _ = mc_product_moments(
            q.weight_layers(), config["n_cov_samples"], seed=config["seed"] + 1
        )
        flat = cov.flat_matrix()
        flags = {}
    else:
        anchor = data.X[int(config["anchor_index"])]
        samples = sample_local_products(
            spec, q, anchor, config["n_cov_samples"], seed=config["seed"] + 1
        )
        report = empirical_cov(
            samples, anchor=anchor, flag_entries=int(config["flag_entries"]),
            seed=config["seed"] + 2,
        )
        mean, flat = report.mean, report.cov.flat_matrix()
        flags = {str(k): v for k, v in sorted(report.flags.items())}
        write_json(out / "multimodal_flags.json", {
            "chosen_components": flags,
            "multimodal_entries": report.multimodal_entries,
        })

    write_matrix_csv(out / "cov.csv", flat)
    write_sidecar(out / "cov.csv", config, config["seed"])
    write_ppm_heatmap(out / "cov.ppm", flat)
    write_matrix_csv(out / "mean.csv", mean)
    metrics = _heatmap_metrics(flat)
    metrics["mode"] = mode
    metrics["depth"] = depth
    write_json(out / "heatmap_metrics.json", metrics)
    print(
        f"cov-heatmap [{mode}, depth {depth}]: max |diag| {metrics['max_diag']:.6g}, "
        f"max |offdiag| {metrics['max_offdiag']:.6g}"
    )
    return 0


def cmd_depth_gap(config: dict, out: Path, jobs: int) -> int:
    train_ds = two_moons(
        config["dataset"]["n"], config["dataset"]["noise_std"], config["dataset"]["seed"]
    )
    test_ds = two_moons(config["test_n"], config["dataset"]["noise_std"], config["test_seed"])
    act = _activation(config["activation"], config["alpha"])
    hmc = HMCConfig(seed=0, prior_precision=config["prior_precision"], **config["hmc"])
    vi = TrainConfig(**config["mfvi"])
    report = depth_gap_sweep(
        depths=config["depths"],
        param_budget=config["budget"],
        train_ds=train_ds,
        test_ds=test_ds,
        activation=act,
        restarts=config["restarts"],
        seed=config["seed"],
        hmc_config=hmc,
        mfvi_config=vi,
        prior_precision=config["prior_precision"],
        jobs=jobs,
    )
    report.to_csv(out / "gap.csv")
    write_sidecar(out / "gap.csv", config, config["seed"])
    report.to_json(out / "gap_summary.json")
    for depth in config["depths"]:
        if any(c.depth == depth for c in report.cells):
            print(
                f"depth {depth}: median E_W {report.median(depth, 'e_w'):.4f}, "
                f"median E_KL {report.median(depth, 'e_kl'):.4f}, "
                f"median acc {report.median(depth, 'test_acc'):.3f}"
            )
    if report.failures:
        for failure in report.failures:
            print(f"failed cell: {failure}", file=sys.stderr)
        return 1
    return 0


def cmd_mvg_check(config: dict, out: Path, jobs: int) -> int:
    rng = derived_rng(config["seed"], 0x36C)
    worst_se = 0.0
    worst_rel = 0.0
    rows = []
    for i in range(int(config["sets"])):
        dims = rng.integers(1, config["max_dim"] + 1, size=4)
        A = rng.normal(size=(dims[0], dims[1]))
        mu_B = rng.normal(size=(dims[1], dims[2]))
        C = rng.normal(size=(dims[2], dims[3]))
        factors = MVGFactors(A, C, mu_B)
        analytic = mvg_product(factors)
        _, cov, _, se_cov = mc_mvg_moments(factors, int(config["n"]), seed=config["seed"] + i)
        gap = np.abs(analytic.cov.data - cov.data)
        dev_se = float(np.max(gap / np.maximum(se_cov.data, 1e-300)))
        scale = float(np.max(np.abs(analytic.cov.data)))
        rel = float(np.max(gap) / scale) if scale > 0 else 0.0
        worst_se = max(worst_se, dev_se)
        worst_rel = max(worst_rel, rel)
        rows.append({"set": i, "shape": [int(d) for d in dims], "max_dev_se": dev_se, "max_rel_dev": rel})
    ok = worst_se <= config["tolerance_se"]
    result = {
        "pass": bool(ok),
        "max_deviation_se": worst_se,
        "max_relative_deviation": worst_rel,
        "sets": rows,
    }
    write_json(out / "mvg_check.json", result)
    write_sidecar(out / "mvg_check.json", config, config["seed"])
    print(
        f"mvg-check: {'PASS' if ok else 'FAIL'} "
        f"(max deviation {worst_se:.3f} SE, max relative deviation {worst_rel:.3e})"
    )
    return 0 if ok else 1


def cmd_uat_demo(config: dict, out: Path, jobs: int) -> int:
    target = TargetPredictive.from_components(config["target"])
    qm = quantile_map(target)
    mapper = fit_rv_mapper(qm, int(config["width"]))
    intro = build_rv_introducer(len(config["anchor"]), config["sigma_intro"])
    spec, q = assemble_posterior(intro, mapper, config["weight_std"])
    anchor = np.asarray(config["anchor"], dtype=np.float64)
    n = int(config["n"])
    ks = induced_vs_target_ks(spec, q, target, anchor, n, seed=config["seed"])

    from .mfvi import predict

    samples = predict(q, spec, anchor, n, seed=config["seed"])[:, 0]
    _, gmm_k, _ = gmm_bic_select(samples, k_max=4, seed=config["seed"])

    lo, hi = target.support()
    grid = np.linspace(lo, hi, int(config["bins"]))
    write_matrix_csv(
        out / "target_density.csv",
        np.column_stack([grid, target.pdf(grid)]),
        header=["y", "density"],
    )
    write_sidecar(out / "target_density.csv", config, config["seed"])
    write_histogram_csv(out / "induced_hist.csv", samples, bins=int(config["bins"]))
    write_json(
        out / "ks.json",
        {
            "ks": ks,
            "n": n,
            "mapper_rmse": mapper.rmse,
            "under_capacity": mapper.under_capacity,
            "gmm_components": gmm_k,
        },
    )
    print(f"uat-demo: KS {ks:.4f} at n {n}, mapper rmse {mapper.rmse:.4f}, gmm k {gmm_k}")
    return 0


def cmd_train(config: dict, out: Path, jobs: int) -> int:
    data = _make_dataset(config["dataset"])
    act = _activation(config["activation"], config["alpha"])
    spec = NetworkSpec(tuple(config["widths"]), act, has_bias=config["bias"])
    tc = TrainConfig(seed=config["seed"], **config["train"])
    q = train(spec, data, PriorSpec(config["prior_std"]), tc)
    write_json(out / "checkpoint.json", q.to_json())
    write_sidecar(out / "checkpoint.json", config, config["seed"])
    history = np.array(q.history, dtype=np.float64)
    write_matrix_csv(
        out / "loss_history.csv", history,
        header=["epoch", "neg_elbo", "kl_term", "nll_term"],
    )
    print(
        f"train: {len(q.history)} epochs, final negative ELBO {q.history[-1][1]:.4f}"
    )
    return 0


def cmd_prior_density(config: dict, out: Path, jobs: int) -> int:
    lo, hi = config["range"]
    for L in config["depths"]:
        samples = prior_element_density(
            int(L), int(config["width"]), config["sigma"], int(config["n"]),
            seed=config["seed"] + int(L),
        )
        path = out / f"prior_density_L{L}.csv"
        write_histogram_csv(path, samples, bins=int(config["bins"]), value_range=(lo, hi))
        write_sidecar(path, config, config["seed"])
    print(f"prior-density: wrote {len(config['depths'])} density files to {out}")
    return 0


COMMANDS = {
    "cov-heatmap": cmd_cov_heatmap,
    "depth-gap": cmd_depth_gap,
    "mvg-check": cmd_mvg_check,
    "uat-demo": cmd_uat_demo,
    "train": cmd_train,
    "prior-density": cmd_prior_density,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfdl",
        description="Deep mean-field posterior experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory (default $MFDL_OUT or ./mfdl_out)")
    common.add_argument("--jobs", type=int, default=1, help="parallel jobs (default 1)")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", dest="assignments",
        help="override one config key (dotted path, JSON value)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.command, args.config, args.seed, args.assignments)
    except (ConfigError, OSError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get("MFDL_OUT") or "mfdl_out")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"{args.command}_config.json", config)
    try:
        return COMMANDS[args.command](config, out, max(1, args.jobs))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"{args.command} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
