"""Command-line driver for reproducible experiment runs.

Subcommands: train, quam, baseline, eval, grid, varstudy, simplex.  Every
run takes a --config file, writes a canonical config echo plus its outputs
to the output directory, and ends with one machine-parsable JSON status
line.  Exit codes: 0 success, 2 usage/config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as D
from . import models as M
from .config import ConfigError, ExperimentConfig
from .estimator import quam_score, variance_sweep
from .measures import decompose_a, decompose_b, entropy_cat, entropy_gauss
from .metrics import ScoredLabels, aupr, auroc, ece, fpr_at_tpr, selective_auc, simplex_surface
from .samplers import HMCAborted, deep_ensemble, hmc_posterior, mc_dropout, csghmc
from .search import SearchConfig, trajectory_to_jsonl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _status(command: str, status: str, **extra):
    print(json.dumps({"status": status, "command": command, **extra}))


def load_dataset(cfg: ExperimentConfig) -> D.LabeledDataset:
    name = cfg.require("dataset", "name")
    seed = cfg.get_int("dataset", "seed", 0)
    if name == "two_moons":
        return D.gen_two_moons(cfg.get_int("dataset", "n", 200), cfg.get_float("dataset", "noise", 0.1), seed)
    if name == "three_gaussians":
        return D.gen_three_gaussians(seed)
    if name == "sine":
        return D.gen_sine(cfg.get_int("dataset", "n", 200), seed)
    if name == "idx":
        images = cfg.require("dataset", "images")
        labels = cfg.require("dataset", "labels")
        for path in (images, labels):
            if not os.path.exists(path):
                raise UsageError(f"dataset file does not exist: {path}")
        ds = D.load_idx(images, labels)
        limit = cfg.get_int("dataset", "limit", 0)
        if limit:
            ds = D.subset_split(ds, [limit], seed=seed)[0]
        return ds
    if name == "csv":
        path = cfg.require("dataset", "path")
        if not os.path.exists(path):
            raise UsageError(f"dataset file does not exist: {path}")
        return D.from_csv(path, cfg.get_str("dataset", "kind", "classification"))
    raise UsageError(f"unknown dataset name {name!r}")


def load_arch(cfg: ExperimentConfig) -> M.ArchSpec:
    widths = cfg.get_ints("arch", "widths")
    if widths is None:
        raise UsageError("missing [arch] widths")
    return M.ArchSpec(
        widths=widths,
        head=cfg.get_str("arch", "head", "categorical"),
        dropout_prob=cfg.get_float("arch", "dropout_prob", 0.0),
    )


def load_train_config(cfg: ExperimentConfig, seed: int) -> M.TrainConfig:
    return M.TrainConfig(
        lr=cfg.get_float("train", "lr", 5e-3),
        weight_decay=cfg.get_float("train", "weight_decay", 1e-3),
        epochs=cfg.get_int("train", "epochs", 200),
        batch_size=cfg.get_int("train", "batch_size", None),
        seed=seed,
    )


def load_search_config(cfg: ExperimentConfig, seed: int) -> SearchConfig:
    return SearchConfig(
        c0=cfg.get_float("search", "c0", 1.0),
        eta_factor=cfg.get_float("search", "eta_factor", 1.5),
        eta_every=cfg.get_int("search", "eta_every", 10),
        gamma=cfg.get_float("search", "gamma", None),
        steps=cfg.get_int("search", "steps", 100),
        lr=cfg.get_float("search", "lr", 1e-2),
        weight_decay=cfg.get_float("search", "weight_decay", 1e-3),
        batch_size=cfg.get_int("search", "batch_size", None),
        delta_scope=cfg.get_str("search", "delta_scope", "all_params"),
        seed=seed,
    )


def load_test_inputs(cfg: ExperimentConfig) -> np.ndarray:
    path = cfg.require("test_inputs", "file")
    if not os.path.exists(path):
        raise UsageError(f"test input file does not exist: {path}")
    rows = []
    with open(path) as f:
        f.readline()  # header
        for line in f:
            if line.strip():
                rows.append([float(c) for c in line.split(",")])
    return np.asarray(rows)


def _prepare_out(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.get_str("output", "dir", "runs/out")
    try:
        os.makedirs(out, exist_ok=True)
        cfg.dump(os.path.join(out, "config_echo.ini"))
    except OSError as e:
        raise UsageError(f"cannot write to output directory {out}: {e}") from e
    return out


def _breakdown_row(i, br) -> str:
    return json.dumps({"input_id": i, "aleatoric": br.aleatoric, "epistemic": br.epistemic, "total": br.total, "setting": br.setting, "flags": list(br.flags)})


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get_int("experiment", "seed", 0)
    dataset = load_dataset(cfg)
    arch = load_arch(cfg)
    log: list = []
    params = M.train(dataset, arch, load_train_config(cfg, seed), log=log)
    ckpt = os.path.join(out, "model.ckpt")
    M.save_checkpoint(params, ckpt)
    with open(os.path.join(out, "train_log.jsonl"), "w") as f:
        for row in log:
            f.write(json.dumps(row) + "\n")
    _status("train", "ok", checkpoint=ckpt, final_loss=M.mean_train_loss(params, dataset))
    return EXIT_OK


def cmd_quam(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get_int("experiment", "seed", 0)
    dataset = load_dataset(cfg)
    reference = M.load_checkpoint(cfg.require("reference", "checkpoint"))
    xs = load_test_inputs(cfg)
    temperature = cfg.get_float("estimator", "temperature", 0.1)
    setting = cfg.get_str("estimator", "setting", "b")
    search_cfg = load_search_config(cfg, seed)
    save_traj = cfg.get_bool("output", "trajectories", True)

    def one(i):
        br, trajs = quam_score(xs[i], dataset, reference, search_cfg, temperature, setting=setting, return_trajectories=True)
        return i, br, trajs

    results = _run_parallel(one, len(xs), args.jobs)
    with open(os.path.join(out, "scores.jsonl"), "w") as f:
        for i, br, trajs in results:
            f.write(_breakdown_row(i, br) + "\n")
            if save_traj:
                for t in trajs:
                    trajectory_to_jsonl(t, os.path.join(out, f"trajectory_{i:04d}_{t.target.replace(':', '')}.jsonl"))
    _status("quam", "ok", n=len(xs), out=out)
    return EXIT_OK


def _run_parallel(fn, n, jobs):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return sorted(pool.map(fn, range(n)), key=lambda r: r[0])
    return [fn(i) for i in range(n)]


def cmd_baseline(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get_int("experiment", "seed", 0)
    method = cfg.require("baseline", "method")
    dataset = load_dataset(cfg)
    xs = load_test_inputs(cfg)
    arch = load_arch(cfg)

    if method == "de":
        sampler = deep_ensemble(dataset, arch, cfg.get_int("baseline", "n_members", 5), load_train_config(cfg, seed))
    elif method == "mcd":
        cfg.require("reference", "checkpoint")  # dropout samples come from the reference
        sampler = None
    elif method == "csghmc":
        sampler = csghmc(
            dataset,
            arch,
            cycles=cfg.get_int("baseline", "cycles", 4),
            steps_per_cycle=cfg.get_int("baseline", "steps_per_cycle", 200),
            step_size=cfg.get_float("baseline", "step_size", 1e-3),
            temperature=cfg.get_float("baseline", "temperature", 1.0),
            seed=seed,
            prior_precision=cfg.get_float("baseline", "prior_precision", 1.0),
        )
    elif method == "hmc":
        sampler = hmc_posterior(
            dataset,
            arch,
            prior_precision=cfg.get_float("baseline", "prior_precision", 1e-3),
            n_samples=cfg.get_int("baseline", "n_samples", 500),
            n_leapfrog=cfg.get_int("baseline", "n_leapfrog", 25),
            step_size=cfg.get_float("baseline", "step_size", 2e-3),
            seed=seed,
            burn_in=cfg.get_int("baseline", "burn_in", 500),
        )
    else:
        raise UsageError(f"unknown baseline method {method!r}")

    ref_ckpt = cfg.get_str("reference", "checkpoint", None)
    reference = M.load_checkpoint(ref_ckpt) if ref_ckpt else None

    rows = []
    for i, x in enumerate(xs):
        if method == "mcd":
            samples = mc_dropout(reference, x, cfg.get_int("baseline", "n_samples", 500), seed=seed).predictive_samples()
        else:
            samples = sampler.predictive_samples(x)
        br_a = decompose_a(samples)
        if reference is not None:
            br_b = decompose_b(M.predict(reference, x), samples)
        else:
            br_b = None
        rows.append((i, br_a, br_b))
    with open(os.path.join(out, "scores_a.jsonl"), "w") as f:
        for i, br_a, _ in rows:
            f.write(_breakdown_row(i, br_a) + "\n")
    if all(r[2] is not None for r in rows):
        with open(os.path.join(out, "scores_b.jsonl"), "w") as f:
            for i, _, br_b in rows:
                f.write(_breakdown_row(i, br_b) + "\n")
    diag = {}
    if sampler is not None:
        diag = {k: v for k, v in sampler.diagnostics.items() if isinstance(v, (int, float, str))}
    _status("baseline", "ok", method=method, n=len(xs), out=out, **diag)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    id_path = cfg.require("eval", "id_scores")
    pos_path = cfg.require("eval", "positive_scores")
    field = cfg.get_str("eval", "field", "epistemic")
    metrics = cfg.get_str("eval", "metrics", "auroc,aupr,fpr_at_tpr95").replace(",", " ").split()

    def read_scores(path):
        if not os.path.exists(path):
            raise UsageError(f"scores file does not exist: {path}")
        vals = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    vals.append(float(json.loads(line)[field]))
        return np.asarray(vals)

    id_scores = read_scores(id_path)
    pos_scores = read_scores(pos_path)
    scored = ScoredLabels(np.concatenate([id_scores, pos_scores]), np.concatenate([np.zeros(len(id_scores), dtype=int), np.ones(len(pos_scores), dtype=int)]))
    results = []
    for m in metrics:
        if m == "auroc":
            value = auroc(scored)
        elif m == "aupr":
            value = aupr(scored)
        elif m.startswith("fpr_at_tpr"):
            target = float(m[len("fpr_at_tpr") :]) / 100 if len(m) > len("fpr_at_tpr") else 0.95
            value = fpr_at_tpr(scored, target)
        else:
            raise UsageError(f"unknown metric {m!r}")
        results.append({"metric": m, "value": value, "n": int(len(scored.scores)), "seed": cfg.get_int("experiment", "seed", 0)})
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as f:
        json.dump({"records": results, "config": {s: dict(kv) for s, kv in cfg.sections.items()}}, f, indent=2)
    _status("eval", "ok", out=path, **{r["metric"]: r["value"] for r in results})
    return EXIT_OK


def cmd_grid(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get_int("experiment", "seed", 0)
    dataset = load_dataset(cfg)
    reference = M.load_checkpoint(cfg.require("reference", "checkpoint"))
    res = cfg.get_int("grid", "resolution", 40)
    x_lo, x_hi = cfg.get_floats("grid", "x_range", (-1.5, 2.5))
    y_lo, y_hi = cfg.get_floats("grid", "y_range", (-1.0, 1.5))
    temperature = cfg.get_float("estimator", "temperature", 0.1)
    setting = cfg.get_str("estimator", "setting", "a")
    search_cfg = load_search_config(cfg, seed)
    xs = np.linspace(x_lo, x_hi, res)
    ys = np.linspace(y_lo, y_hi, res)
    points = np.array([(x, y) for x in xs for y in ys])

    def one(i):
        return i, quam_score(points[i], dataset, reference, search_cfg, temperature, setting=setting)

    rows = _run_parallel(one, len(points), args.jobs)
    path = os.path.join(out, "grid.csv")
    with open(path, "w") as f:
        f.write("x,y,total,aleatoric,epistemic\n")
        for i, br in rows:
            f.write(f"{points[i][0]:.17g},{points[i][1]:.17g},{br.total:.17g},{br.aleatoric:.17g},{br.epistemic:.17g}\n")
    _status("grid", "ok", rows=len(points), out=path)
    return EXIT_OK


def cmd_varstudy(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    parameter = cfg.get_str("varstudy", "parameter", "sigma_p2")
    lo, hi = cfg.get_floats("varstudy", "range", (1.0, 3.0))
    count = cfg.get_int("varstudy", "count", 9)
    rows = variance_sweep(parameter, np.linspace(lo, hi, count))
    path = os.path.join(out, f"varstudy_{parameter}.csv")
    with open(path, "w") as f:
        f.write(f"{parameter},variance\n")
        for v, var in rows:
            f.write(f"{v:.17g},{var:.17g}\n")
    _status("varstudy", "ok", parameter=parameter, rows=len(rows), out=path)
    return EXIT_OK


def cmd_simplex(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get_int("experiment", "seed", 0)
    dataset = load_dataset(cfg)
    arch = load_arch(cfg)
    x = np.asarray(cfg.get_floats("simplex", "test_point", tuple(D.THREE_GAUSSIAN_TEST_POINT)))
    rows = simplex_surface(
        dataset,
        x,
        arch,
        resolution=cfg.get_int("simplex", "resolution", 15),
        repeats=cfg.get_int("simplex", "repeats", 20),
        cfg=load_train_config(cfg, seed),
    )
    path = os.path.join(out, "simplex.csv")
    with open(path, "w") as f:
        f.write("p0,p1,p2,median_likelihood,failures\n")
        for row in rows:
            p0, p1, p2 = row["target"]
            f.write(f"{p0:.17g},{p1:.17g},{p2:.17g},{row['median_likelihood']:.17g},{row['failures']}\n")
    _status("simplex", "ok", rows=len(rows), out=path)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "quam": cmd_quam,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "varstudy": cmd_varstudy,
    "simplex": cmd_simplex,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="quam", description="Adversarial-model epistemic uncertainty experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--jobs", type=int, default=1, help="concurrent per-test-point tasks")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides config)")

    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as e:
        _status(args.command, "usage_error", error=str(e))
        return EXIT_USAGE
    except (M.TrainingDiverged, HMCAborted) as e:
        _status(args.command, "numerical_abort", error=str(e))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
