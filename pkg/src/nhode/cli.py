"""``nhode`` command-line interface.

All artifacts are written deterministically (fixed float formatting, sorted
JSON keys, no timestamps), so re-running a command with the same config and
seed overwrites its outputs with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_seeds
from .evaluation import (
    Predictor,
    conservation_audit,
    epsilon_sweep,
    evaluate,
    export_metrics,
    identifiability_demo,
    long_rollout_csv,
    heldout_initial_conditions,
)
from .odeint import SolverError
from .systems import dataset_digest, generate_dataset, load_dataset, save_dataset
from .training import TrainingDiverged, build_encoder, build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("nhode")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default(args.system)
    model, data, train_s, ev, sweep = cfg.model, cfg.data, cfg.train, cfg.eval, cfg.sweep
    if getattr(args, "model", None):
        model = replace(model, kind=args.model)
    if getattr(args, "coords", None):
        model = replace(model, coords=args.coords)
    if getattr(args, "n_traj", None) is not None:
        data, sweep = replace(data, n_traj=args.n_traj), replace(sweep, n_traj=args.n_traj)
    if getattr(args, "epochs", None) is not None:
        train_s = replace(train_s, epochs=args.epochs)
    if getattr(args, "substeps", None) is not None:
        train_s, ev = replace(train_s, substeps=args.substeps), replace(ev, substeps=args.substeps)
    if getattr(args, "long_horizon", None) is not None:
        ev = replace(ev, long_horizon=args.long_horizon)
    seeds = parse_seeds(args.seeds) if getattr(args, "seeds", None) else cfg.seeds
    out_dir = args.out or cfg.out_dir
    return cfg.replace(model=model, data=data, train=train_s, eval=ev, sweep=sweep, seeds=seeds, out_dir=out_dir)


def _system_header(cfg: ExperimentConfig) -> dict:
    spec = cfg.spec()
    return {"kind": spec.kind, "parameters": spec.parameters(), "observed": list(cfg.scheme().observed)}


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def cmd_init_config(args) -> int:
    cfg = _load_config(args)
    text = cfg.to_text()
    if args.out_file:
        out = Path(args.out_file)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.data.seed
    path = Path(args.data) if args.data else Path(cfg.out_dir) / "data.nhds"
    ds = generate_dataset(cfg.spec(), cfg.data.n_traj, cfg.data.horizon, cfg.data.steps,
                          cfg.solver(), cfg.scheme(), seed)
    save_dataset(ds, path)
    print(f"wrote {ds.n_traj} trajectories x {ds.steps} steps to {path} (digest {dataset_digest(ds):016x})")
    return EXIT_OK


def _check_dataset(cfg: ExperimentConfig, ds) -> None:
    spec = cfg.spec()
    if ds.spec != spec:
        raise ConfigError(f"dataset system {ds.spec} does not match config system {spec}")
    if ds.scheme != cfg.scheme():
        raise ConfigError("dataset observation scheme does not match config")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    data_path = Path(args.data) if args.data else out / "data.nhds"
    try:
        ds = load_dataset(data_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load dataset {data_path}: {exc}") from exc
    _check_dataset(cfg, ds)
    digest = f"{dataset_digest(ds):016x}"
    spec, scheme = cfg.spec(), cfg.scheme()
    if scheme.hidden and not cfg.train.use_encoder:
        log.info("hidden components present; training with the full initial state known")
    for seed in cfg.seeds:
        tcfg = cfg.train_config(seed)
        model = build_model(cfg.model.kind, cfg.model.coords, spec, seed, cfg.model.width, cfg.model.depth)
        encoder = build_encoder(scheme, tcfg.window, seed, cfg.model.width, cfg.model.depth) \
            if tcfg.use_encoder else None

        def progress(rec, seed=seed):
            log.info("seed %d epoch %d lr %.3g train %.6g val %.6g", seed, rec.epoch, rec.learning_rate,
                     rec.train_loss, rec.val_loss)

        result = train(model, encoder, ds, tcfg, progress)
        extra = {"dataset_digest": digest, "system": _system_header(cfg),
                 "architecture": {"width": cfg.model.width, "depth": cfg.model.depth}}
        ck = save_checkpoint(out / f"model_seed{seed}.nhck", result.model, result.encoder, tcfg, extra)
        (out / f"history_seed{seed}.csv").write_text(result.history_csv())
        last = result.history[-1] if result.history else None
        print(f"seed {seed}: {ck}" + (f" final train {last.train_loss:.6g} val {last.val_loss:.6g}" if last else ""))
    return EXIT_OK


def _load_predictors(cfg: ExperimentConfig, paths) -> list[Predictor]:
    want = _system_header(cfg)
    preds = []
    for p in paths:
        try:
            ck = load_checkpoint(p)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load checkpoint {p}: {exc}") from exc
        if ck.header.get("system") != want:
            raise ConfigError(f"checkpoint {p} was trained on a different system or observation scheme")
        preds.append(Predictor.from_model(ck.model, ck.encoder))
    if len({pr.name for pr in preds}) > 1:
        raise ConfigError("checkpoints mix different model variants")
    return preds


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    spec, scheme, ev = cfg.spec(), cfg.scheme(), cfg.eval
    if args.oracle:
        preds = [Predictor.oracle(spec)]
    else:
        paths = args.checkpoints or [Path(cfg.out_dir) / f"model_seed{s}.nhck" for s in cfg.seeds]
        preds = _load_predictors(cfg, paths)
    rec = evaluate(preds, spec, scheme, ev.n_test, ev.horizon, ev.dt, ev.seed, ev.method, ev.substeps)
    out = Path(cfg.out_dir) / "eval"
    windows = sorted({min(cfg.data.horizon, ev.horizon), ev.horizon})
    export_metrics(rec, out, preds[0].name, windows)
    for t_max in windows:
        print(f"{preds[0].name} t<={t_max:g}: observed {rec.scalar('observed_mse', t_max):.6g} "
              f"unobserved {rec.scalar('hidden_mse', t_max):.6g} ({len(preds)} model(s))")
    if ev.long_horizon > 0:
        path = long_rollout_csv(preds[0], spec, out / "long_rollout.csv", scheme, ev.long_horizon, ev.dt,
                                ev.seed, ev.method)
        print(f"long rollout written to {path}")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _load_config(args)
    spec = cfg.spec()
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
    else:
        seed = cfg.seeds[0]
        model = build_model(cfg.model.kind, cfg.model.coords, spec, seed, cfg.model.width, cfg.model.depth)
    x0 = heldout_initial_conditions(spec, 1, cfg.eval.seed)[0]
    report = conservation_audit(model, x0, args.horizon, args.dt, cfg.eval.method)
    passes = report.passes()
    _write_json(Path(cfg.out_dir) / "audit.json", {**report.as_dict(), "passes": passes})
    for q in ("energy", "momentum", "angular"):
        if q in passes:
            status = "PASS" if passes[q] else "FAIL"
        elif q == "angular" and report.angular_drift is None:
            status = "undefined in 1D"
        else:
            status = "not guaranteed"
        print(f"{report.model} {q}: {status}")
    print(f"drifts: energy {report.energy_drift} momentum {report.momentum_drift} angular {report.angular_drift}")
    return EXIT_OK


def cmd_eps_sweep(args) -> int:
    cfg = _load_config(args)
    sw = cfg.sweep
    tcfg = cfg.train_config(cfg.seeds[0])
    res = epsilon_sweep(sw.eps_values, tcfg, cfg.model.kind, cfg.model.coords, sw.n_traj, sw.horizon, sw.steps,
                        sw.n_test, sw.test_steps, sw.test_dt, cfg.model.width, cfg.model.depth,
                        cfg.data.seed, cfg.eval.seed)
    rows_path, q_path = res.write(Path(cfg.out_dir) / "eps_sweep")
    for eps, lo, q1, med, q3, hi in res.quartiles():
        print(f"eps {eps:g}: median {med:.6g} (q1 {q1:.6g}, q3 {q3:.6g})")
    print(f"wrote {rows_path} and {q_path}")
    return EXIT_OK


def cmd_identifiability(args) -> int:
    cfg = _load_config(args)
    if cfg.system.kind != "dms":
        raise ConfigError("identifiability needs a dms system config")
    idc = cfg.identifiability
    try:
        rep = identifiability_demo(cfg.spec(), idc.k2_tilde, idc.l2_tilde, idc.n_ic, idc.horizon, idc.steps,
                                   idc.rtol, idc.atol, idc.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.out_dir) / "identifiability"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "hidden_offset.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"ic_{i}" for i in range(len(rep.cases))])
        for i, t in enumerate(rep.times):
            w.writerow([repr(float(t))] + [repr(float(c.hidden_offset[i])) for c in rep.cases])
    summary = {
        "a": rep.shift,
        "cases": [{"x0": c.x0.tolist(), "observed_deviation": c.observed_deviation,
                   "hidden_momentum_deviation": c.hidden_momentum_deviation, "branch_ok": c.branch_ok}
                  for c in rep.cases],
    }
    if rep.valid_cases:
        summary["max_observed_deviation"] = rep.max_observed_deviation
        summary["max_hidden_offset_error"] = rep.max_hidden_offset_error
    _write_json(out / "report.json", summary)
    print(f"a = {rep.shift:.12g}")
    skipped = len(rep.cases) - len(rep.valid_cases)
    if rep.valid_cases:
        print(f"max observed deviation {rep.max_observed_deviation:.3g}; "
              f"hidden offset error {rep.max_hidden_offset_error:.3g}; skipped {skipped}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nhode", description="Neural Hamiltonian ODEs for partially observed systems")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--config", help="experiment INI file (defaults for --system if omitted)")
        sp.add_argument("--system", default="dms", choices=("dms", "nlms", "tbp"),
                        help="system whose defaults apply when no --config is given")
        sp.add_argument("--out", help="output directory (overrides [experiment] out_dir)")
        sp.add_argument("--model", help="model kind override")
        sp.add_argument("--coords", help="coordinate override (abs or rel)")
        sp.add_argument("--n-traj", type=int, dest="n_traj", help="trajectory count override")
        sp.add_argument("--epochs", type=int, help="epoch count override")
        sp.add_argument("--substeps", type=int, help="fixed steps per data interval override")
        if seeds:
            sp.add_argument("--seeds", "--seed", dest="seeds", help="seed list, e.g. 0..9 or 0,3,5")
        return sp

    sp = common(sub.add_parser("init-config", help="print the resolved config"), seeds=True)
    sp.add_argument("out_file", nargs="?")
    sp.set_defaults(func=cmd_init_config)

    sp = common(sub.add_parser("gen-data", help="generate a ground-truth dataset"))
    sp.add_argument("--seed", type=int, help="data seed override")
    sp.add_argument("--data", help="dataset path (default <out>/data.nhds)")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train one model per seed"), seeds=True)
    sp.add_argument("--data", help="dataset path (default <out>/data.nhds)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("evaluate", help="roll out checkpoints and export metrics"), seeds=True)
    sp.add_argument("checkpoints", nargs="*", help="checkpoint files (default <out>/model_seed<s>.nhck)")
    sp.add_argument("--oracle", action="store_true", help="evaluate the exact vector field instead")
    sp.add_argument("--long-horizon", type=float, dest="long_horizon",
                    help="also write a single long qualitative rollout up to this time")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("audit", help="conservation audit of a checkpoint or a random model"), seeds=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.set_defaults(func=cmd_audit)

    sp = common(sub.add_parser("eps-sweep", help="softening-length sweep for the three-body system"), seeds=True)
    sp.set_defaults(func=cmd_eps_sweep, system="tbp")

    sp = common(sub.add_parser("identifiability", help="shifted hidden-mass construction for dms"))
    sp.set_defaults(func=cmd_identifiability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
