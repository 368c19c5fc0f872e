"""Rollout training with a loss on observed components only.

For each mini-batch the initial state is either taken from data (full initial
state known) or completed by the encoder, the model's vector field is
integrated with a fixed-step explicit scheme through the whole time grid, and
the mean squared error over observed entries is back-propagated through the
unrolled steps (discretize-then-optimize).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .models import (
    DynamicsModel,
    Encoder,
    ObservationScheme,
    field_graph,
    whiten_inputs,
    initial_state_graph,
    make_model,
)
from .nn import MlpParams, mlp_graph, params_from_bytes, params_to_bytes
from .odeint import integrate_fixed
from .systems import Dataset, derive_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NHCK0001"


class NonFiniteLoss(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1200
    decay_rate: float = 0.95
    decay_every: int = 10
    train_fraction: float = 0.85
    method: str = "rk4"
    substeps: int = 1
    seed: int = 0
    use_encoder: bool = False
    window: int = 10
    whiten_window: bool = True
    clip_norm: float = 100.0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_every < 1 or self.epochs < 0 or self.substeps < 1:
            raise ValueError("decay_every >= 1, epochs >= 0 and substeps >= 1 required")
        if self.method not in ("rk4", "tsit5-fixed"):
            raise ValueError("training integrates with a fixed-step method (rk4 or tsit5-fixed)")

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_rate ** (epoch // self.decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam; returns new parameter arrays and the advanced state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step, b1, b2, state.eps)


def split_dataset(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random-permutation split into (train, validation)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n_train = int(round(fraction * ds.n_traj))
    if n_train == 0 or n_train == ds.n_traj:
        raise ValueError(f"split of {ds.n_traj} trajectories at {fraction} leaves an empty part")
    perm = derive_rng(seed, "split").permutation(ds.n_traj)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


@dataclass
class LossResult:
    value: float
    model_grads: list[np.ndarray] | None = None
    encoder_grads: list[np.ndarray] | None = None


def observed_loss(model: DynamicsModel, scheme: ObservationScheme, states: np.ndarray,
                  times: np.ndarray, cfg: TrainConfig, encoder: Encoder | None = None,
                  grad: bool = True, *, field_override=None) -> LossResult:
    """Mean squared error over observed entries of a batch of rollouts.

    ``states`` is ``(batch, steps, 2n)``. Hidden channels are only read at
    ``t0`` and only when no encoder is given (full initial state known).
    ``field_override`` swaps in a fixed numeric field ``f(x)`` (e.g. the true
    dynamics) in place of the model's; nothing is differentiated through it.
    """
    states = np.asarray(states)
    if states.ndim != 3 or states.shape[0] == 0:
        raise ValueError("need a non-empty (batch, steps, dim) array")
    if len(times) != states.shape[1]:
        raise ValueError("time grid does not match the trajectories")
    tape = ad.Tape(record=grad)
    net = model.net.bind(tape)
    obs_idx = np.asarray(scheme.observed)
    targets = np.take(states, obs_idx, axis=2)
    batch, steps, n_obs = targets.shape
    enc_net = None
    if encoder is None:
        x0 = tape.constant(states[:, 0, :])
    else:
        k = encoder.window
        if steps < k + 1:
            raise ValueError(f"encoder window K={k} needs at least {k + 1} time points")
        enc_net = encoder.net.bind(tape)
        window = tape.constant(encoder.prepare(targets[:, : k + 1, :].reshape(batch, -1)))
        x0 = initial_state_graph(scheme, tape.constant(targets[:, 0, :]), mlp_graph(enc_net, window))

    def f(t, x):
        if field_override is not None:
            return tape.constant(field_override(x.value))
        return field_graph(model, net, x)

    with np.errstate(over="ignore", invalid="ignore"):
        rolled = integrate_fixed(f, x0, times, cfg.method, cfg.substeps)
        total = None
        for i, x in enumerate(rolled):
            resid = ad.sub(ad.gather(x, obs_idx), tape.constant(targets[:, i, :]))
            term = ad.sum(ad.square(resid))
            total = term if total is None else ad.add(total, term)
        loss = ad.scale(total, 1.0 / (batch * steps * n_obs))
    value = float(loss.value)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value}")
    if not grad:
        return LossResult(value)
    if loss.requires_grad:
        tape.backward(loss)
        model_grads = net.grads()
        enc_grads = enc_net.grads() if enc_net is not None else None
    else:
        model_grads = [np.zeros_like(a) for a in model.net.arrays()]
        enc_grads = [np.zeros_like(a) for a in encoder.net.arrays()] if encoder else None
    return LossResult(value, model_grads, enc_grads)


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float
    clipped: int = 0
    nonfinite: int = 0


@dataclass
class TrainResult:
    model: DynamicsModel
    encoder: Encoder | None
    history: list[EpochRecord] = field(default_factory=list)

    def history_csv(self) -> str:
        rows = ["epoch,learning_rate,train_loss,val_loss,clipped,nonfinite"]
        for r in self.history:
            rows.append(f"{r.epoch},{r.learning_rate!r},{r.train_loss!r},{r.val_loss!r},{r.clipped},{r.nonfinite}")
        return "\n".join(rows) + "\n"


def _clip(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], bool]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm <= max_norm:
        return grads, False
    s = max_norm / norm
    return [g * s for g in grads], True


def _dataset_loss(model, ds: Dataset, cfg: TrainConfig, encoder) -> float:
    total, count = 0.0, 0
    for start in range(0, ds.n_traj, 256):
        chunk = ds.states[start:start + 256]
        try:
            value = observed_loss(model, ds.scheme, chunk, ds.times, cfg, encoder, grad=False).value
        except NonFiniteLoss:
            return math.inf
        total += value * len(chunk)
        count += len(chunk)
    return total / count


def train(model: DynamicsModel, encoder: Encoder | None, dataset: Dataset, cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Mini-batch rollout training with Adam; deterministic for a fixed ``cfg.seed``.

    ``progress`` is an optional ``callable(EpochRecord)`` invoked after every epoch.
    """
    if cfg.use_encoder and encoder is None:
        raise ValueError("use_encoder is set but no encoder was given")
    if not cfg.use_encoder:
        encoder = None
    train_ds, val_ds = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    times = dataset.times
    model = DynamicsModel(model.kind, model.coords, model.net.copy(), model.n_particles, model.d, model.masses)
    if encoder is not None:
        encoder = encoder.copy()
        if cfg.whiten_window and encoder.shift is None:
            obs = np.asarray(train_ds.scheme.observed)
            encoder = whiten_inputs(encoder, train_ds.states[:, : encoder.window + 1][:, :, obs])
    opt_model = AdamState.zeros_like(model.net.arrays())
    opt_enc = AdamState.zeros_like(encoder.net.arrays()) if encoder else None
    history: list[EpochRecord] = []
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = derive_rng(cfg.seed, "shuffle", str(epoch)).permutation(train_ds.n_traj)
        loss_sum, seen, clipped, nonfinite = 0.0, 0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                res = observed_loss(model, train_ds.scheme, train_ds.states[idx], times, cfg, encoder)
            except (NonFiniteLoss, ad.NonFiniteError):
                nonfinite += 1
                loss_sum, seen = math.inf, seen + len(idx)
                continue
            loss_sum += res.value * len(idx)
            seen += len(idx)
            grads = res.model_grads + (res.encoder_grads or [])
            grads, was_clipped = _clip(grads, cfg.clip_norm)
            clipped += was_clipped
            n_model = len(res.model_grads)
            new_params, opt_model = adam_step(model.net.arrays(), grads[:n_model], opt_model, lr)
            model.net = MlpParams.from_arrays(new_params)
            if encoder is not None:
                new_enc, opt_enc = adam_step(encoder.net.arrays(), grads[n_model:], opt_enc, lr)
                encoder.net = MlpParams.from_arrays(new_enc)
        record = EpochRecord(epoch, lr, loss_sum / max(seen, 1), _dataset_loss(model, val_ds, cfg, encoder),
                             clipped, nonfinite)
        history.append(record)
        if progress is not None:
            progress(record)
        if clipped:
            log.info("epoch %d: gradient norm clipped in %d batches", epoch, clipped)
        bad_epochs = bad_epochs + 1 if not math.isfinite(record.train_loss) else 0
        if bad_epochs >= 3:
            raise TrainingDiverged(f"non-finite training loss for 3 consecutive epochs (last: {epoch})")
    return TrainResult(model, encoder, history)


def build_model(kind: str, coords: str, spec, seed: int, width: int = 128, depth: int = 4) -> DynamicsModel:
    rng = derive_rng(seed, "init", "model")
    masses = spec.masses if kind in ("nhode-pot", "node-phys") else None
    return make_model(kind, coords, spec.n_particles, spec.d, rng, masses, width, depth)


def build_encoder(scheme: ObservationScheme, window: int, seed: int, width: int = 128, depth: int = 4) -> Encoder:
    return Encoder.create(scheme, window, derive_rng(seed, "init", "encoder"), width, depth)


@dataclass
class Checkpoint:
    header: dict
    model: DynamicsModel
    encoder: Encoder | None


def checkpoint_to_bytes(model: DynamicsModel, encoder: Encoder | None, cfg: TrainConfig,
                        extra: dict | None = None) -> bytes:
    """Header (JSON: model layout, train config, caller extras such as the dataset digest)
    followed by the parameter container for the model and, if present, the encoder."""
    header = {
        "model": {"kind": model.kind, "coords": model.coords, "n_particles": model.n_particles,
                  "d": model.d, "masses": list(model.masses) if model.masses else None},
        "train": asdict(cfg),
        "encoder": None if encoder is None else {
            "window": encoder.window, "observed": list(encoder.scheme.observed), "dim": encoder.scheme.dim,
            "input_map": encoder.shift is not None},
    }
    header.update(extra or {})
    text = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(text)), text, params_to_bytes(model.net)]
    if encoder is not None:
        parts.append(params_to_bytes(encoder.net))
        if encoder.shift is not None:
            parts += [encoder.shift.astype("<f8").tobytes(), encoder.mix.astype("<f8").tobytes()]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an NHCK0001 checkpoint")
    (n,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + n].decode())
    net, pos = params_from_bytes(buf, 12 + n)
    m = header["model"]
    model = DynamicsModel(m["kind"], m["coords"], net, m["n_particles"], m["d"], m["masses"])
    encoder = None
    if header["encoder"] is not None:
        enc_net, pos = params_from_bytes(buf, pos)
        e = header["encoder"]
        shift = mix = None
        if e.get("input_map"):
            n_in = enc_net.in_size
            if len(buf) < pos + 8 * n_in * (n_in + 1):
                raise ValueError("truncated encoder input map")
            shift = np.frombuffer(buf, "<f8", n_in, pos).copy()
            mix = np.frombuffer(buf, "<f8", n_in * n_in, pos + 8 * n_in).reshape(n_in, n_in).copy()
            pos += 8 * n_in * (n_in + 1)
        encoder = Encoder(enc_net, e["window"], ObservationScheme(tuple(e["observed"]), e["dim"]), shift, mix)
    if pos != len(buf):
        raise ValueError("trailing bytes after checkpoint parameters")
    return Checkpoint(header, model, encoder)


def save_checkpoint(path, model, encoder, cfg, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(model, encoder, cfg, extra))
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
