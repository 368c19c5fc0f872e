"""Long-horizon qualitative rollout of a checkpoint (or the exact field).

    python3 scripts/long_rollout.py runs/dms/model_seed0.nhck --horizon 200 -o long.csv
    python3 scripts/long_rollout.py --oracle --system nlms --horizon 200 -o long.csv

The CSV holds ``time, true_*, pred_*`` for one held-out initial condition, plus
a one-line stability summary on stdout.
"""

import argparse
import sys

import numpy as np

from nhode.evaluation import Predictor, long_rollout_csv
from nhode.systems import SystemSpec, default_scheme, true_hamiltonian
from nhode.training import load_checkpoint


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--system", default="dms", choices=("dms", "nlms", "tbp"))
    p.add_argument("--horizon", type=float, default=200.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("-o", "--output", default="long_rollout.csv")
    args = p.parse_args(argv)
    if args.oracle == bool(args.checkpoint):
        p.error("give exactly one of a checkpoint or --oracle")

    if args.oracle:
        spec = getattr(SystemSpec, args.system)()
        pred = Predictor.oracle(spec)
    else:
        ck = load_checkpoint(args.checkpoint)
        system = ck.header["system"]
        spec = SystemSpec.from_parameters(system["kind"], system["parameters"])
        pred = Predictor.from_model(ck.model, ck.encoder)
    path = long_rollout_csv(pred, spec, args.output, default_scheme(spec), args.horizon, args.dt, args.seed)

    data = np.loadtxt(path, delimiter=",", skiprows=1)
    dim = spec.state_dim
    truth, got = data[:, 1:1 + dim], data[:, 1 + dim:]
    finite = np.isfinite(got).all(axis=1)
    energy = true_hamiltonian(spec, got[finite])
    print(f"{path}: {len(data)} steps, finite to t={data[finite, 0].max():g}, "
          f"max true-energy change {np.abs(energy - energy[0]).max():.3g}, "
          f"final state error {np.linalg.norm(got[-1] - truth[-1]):.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
