"""Desk-scale learning experiments.

Trains each requested model on a small dataset for several seeds and prints
held-out metrics, one CSV row per (model, seed):

    python3 scripts/desk_scale.py --system dms --models nhode-pot:abs --seeds 0..2
    python3 scripts/desk_scale.py --system nlms --models nhode-pot:rel node-vanilla:rel --horizon 5
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

from nhode.config import parse_seeds
from nhode.evaluation import Predictor, evaluate
from nhode.systems import SYSTEM_DEFAULTS, SystemSpec, default_scheme, generate_dataset
from nhode.training import TrainConfig, build_encoder, build_model, train


def run(system, model, coords, seed, n_traj=200, epochs=300, horizon=1.0, use_encoder=False,
        width=128, depth=None, data_seed=0, eval_seed=1, n_test=10, dataset=None):
    spec = getattr(SystemSpec, system)()
    scheme = default_scheme(spec)
    depth = SYSTEM_DEFAULTS[system]["depth"] if depth is None else depth
    d = SYSTEM_DEFAULTS[system]
    ds = dataset or generate_dataset(spec, n_traj, d["horizon"], d["steps"], scheme=scheme, seed=data_seed)
    cfg = TrainConfig(epochs=epochs, seed=seed, use_encoder=use_encoder)
    net = build_model(model, coords, spec, seed, width, depth)
    enc = build_encoder(scheme, cfg.window, seed, width, depth) if use_encoder else None
    res = train(net, enc, ds, cfg)
    rec = evaluate(Predictor.from_model(res.model, res.encoder), spec, scheme, n_test=n_test,
                   horizon=horizon, seed=eval_seed)
    return res, rec


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--system", default="dms", choices=("dms", "nlms", "tbp"))
    p.add_argument("--models", nargs="+", default=["nhode-pot:abs"], help="kind:coords pairs")
    p.add_argument("--seeds", default="0..2")
    p.add_argument("--n-traj", type=int, default=200)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--horizon", type=float, default=1.0, help="evaluation horizon")
    p.add_argument("--encoder", action="store_true", help="joint encoder training")
    p.add_argument("--width", type=int, default=128)
    args = p.parse_args(argv)

    spec = getattr(SystemSpec, args.system)()
    d = SYSTEM_DEFAULTS[args.system]
    ds = generate_dataset(spec, args.n_traj, d["horizon"], d["steps"], scheme=default_scheme(spec), seed=0)
    out = csv.writer(sys.stdout)
    out.writerow(["model", "seed", "observed_mse", "unobserved_mse", "final_val_loss", "seconds"])
    for pair in args.models:
        kind, coords = pair.split(":")
        for seed in parse_seeds(args.seeds):
            t0 = time.time()
            res, rec = run(args.system, kind, coords, seed, epochs=args.epochs, horizon=args.horizon,
                           use_encoder=args.encoder, width=args.width, dataset=ds)
            out.writerow([pair, seed, rec.scalar("observed_mse", args.horizon),
                          rec.scalar("hidden_mse", args.horizon), res.history[-1].val_loss,
                          round(time.time() - t0, 1)])
            sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
