"""Training loop and inference for the gait transformer, plus checkpoint I/O."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .core import Trial
from .model import (
    ModelConfig,
    ModelOutput,
    ModelParams,
    NonFiniteError,
    batch_loss,
    forward,
    init_params,
    param_shapes,
    to_internal,
    tokenize,
)
from .phase_codec import PhaseError, encode
from .pose_normalize import normalize_sequence

log = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    """Full-length training arrays for one trial."""

    trial_id: str
    poses: np.ndarray  # T x 10 x 3 canonical
    height: float
    kin: np.ndarray  # T x 9, internal units
    q: np.ndarray  # T x 8
    w: np.ndarray  # T x 4
    dt: float

    @property
    def length(self) -> int:
        return self.poses.shape[0]


def has_targets(trial: Trial) -> bool:
    return trial.gt_kinematics is not None and trial.gt_events is not None


def make_example(trial: Trial) -> Example:
    if not has_targets(trial):
        raise ValueError(f"trial {trial.id!r} has no ground-truth targets")
    targets, q = encode(trial.gt_events, trial.times)
    return Example(
        trial_id=trial.id,
        poses=normalize_sequence(trial).joints,
        height=trial.subject_height,
        kin=to_internal(trial.gt_kinematics),
        q=q,
        w=targets.weights,
        dt=trial.dt,
    )


def stack_batch(examples: Sequence[Example], start: Sequence[int], length: int) -> dict:
    sl = [slice(s, s + length) for s in start]
    return {
        "poses": jnp.asarray(np.stack([e.poses[s] for e, s in zip(examples, sl)])),
        "height": jnp.asarray(np.array([e.height for e in examples])),
        "kin": jnp.asarray(np.stack([e.kin[s] for e, s in zip(examples, sl)])),
        "q": jnp.asarray(np.stack([e.q[s] for e, s in zip(examples, sl)])),
        "w": jnp.asarray(np.stack([e.w[s] for e, s in zip(examples, sl)])),
        "dt": float(examples[0].dt),
    }


def bucket_length(n: int, cfg: ModelConfig) -> tuple:
    """(crop length, batch size) for a sequence of ``n`` frames."""
    fitting = [b for b in cfg.buckets if b[0] <= n]
    if fitting:
        return fitting[-1]
    return n, cfg.buckets[0][1]


def plan_batches(examples: Sequence[Example], cfg: ModelConfig, rng: np.random.Generator | None) -> list:
    """Same-length batches of (indices, crop starts, length).

    With ``rng`` the crop windows and batch order are drawn from it;
    without, crops start at frame 0 and order is fixed.
    """
    groups = {}
    for i, ex in enumerate(examples):
        length, bs = bucket_length(ex.length, cfg)
        start = 0 if rng is None else int(rng.integers(0, ex.length - length + 1))
        groups.setdefault((length, bs, ex.dt), []).append((i, start))
    batches = []
    for (length, bs, _), members in sorted(groups.items()):
        if rng is not None:
            members = [members[j] for j in rng.permutation(len(members))]
        for k in range(0, len(members), bs):
            chunk = members[k:k + bs]
            batches.append(([m[0] for m in chunk], [m[1] for m in chunk], length))
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


_loss_and_grad = jax.jit(jax.value_and_grad(batch_loss), static_argnums=(2,))
_loss_eval = jax.jit(batch_loss, static_argnums=(2,))


def gradients(params: ModelParams, batch: dict, cfg: ModelConfig) -> dict:
    """Exact loss gradients (dropout off) for every parameter."""
    _, grads = _loss_and_grad(params, batch, cfg, None)
    out = {}
    for name, g in grads.items():
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


def batch_value(params: ModelParams, batch: dict, cfg: ModelConfig) -> float:
    return float(_loss_eval(params, batch, cfg, None))


@jax.jit
def _adam_step(params, grads, m, v, step, lr, wd):
    b1t = 1.0 - ADAM_B1**step
    b2t = 1.0 - ADAM_B2**step

    def upd(p, g, m_, v_):
        m_ = ADAM_B1 * m_ + (1.0 - ADAM_B1) * g
        v_ = ADAM_B2 * v_ + (1.0 - ADAM_B2) * g * g
        p = p - lr * ((m_ / b1t) / (jnp.sqrt(v_ / b2t) + ADAM_EPS) + wd * p)
        return p, m_, v_

    out = {k: upd(params[k], grads[k], m[k], v[k]) for k in params}
    return ({k: o[0] for k, o in out.items()}, {k: o[1] for k, o in out.items()},
            {k: o[2] for k, o in out.items()})


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list  # dataset loss before training, then after each epoch
    epochs: int
    skipped: int = 0


def dataset_loss(params: ModelParams, examples: Sequence[Example], cfg: ModelConfig) -> float:
    total, count = 0.0, 0
    for idx, starts, length in plan_batches(examples, cfg, None):
        batch = stack_batch([examples[i] for i in idx], starts, length)
        total += float(_loss_eval(params, batch, cfg, None)) * len(idx)
        count += len(idx)
    return total / count


def train(dataset: Sequence, cfg: ModelConfig, params: ModelParams | None = None,
          progress=None) -> TrainResult:
    """AdamW over length-bucketed, randomly cropped batches.

    ``dataset`` may hold Trials or prepared Examples.  Trials without
    targets, or whose events are too sparse to encode, are skipped.
    """
    examples, skipped = [], 0
    for item in dataset:
        if isinstance(item, Example):
            examples.append(item)
        elif has_targets(item):
            try:
                examples.append(make_example(item))
            except PhaseError as exc:
                log.warning("skipping trial %r: %s", item.id, exc)
                skipped += 1
        else:
            skipped += 1
    if not examples:
        raise ValueError("no trials with targets to train on")
    params = init_params(cfg) if params is None else dict(params)
    m = {k: jnp.zeros_like(p) for k, p in params.items()}
    v = {k: jnp.zeros_like(p) for k, p in params.items()}
    base_key = jax.random.PRNGKey(cfg.seed)
    trace = [dataset_loss(params, examples, cfg)]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx, starts, length in plan_batches(examples, cfg, rng):
            step += 1
            batch = stack_batch([examples[i] for i in idx], starts, length)
            key = jax.random.fold_in(base_key, step) if cfg.dropout_p > 0 else None
            value, grads = _loss_and_grad(params, batch, cfg, key)
            if not np.isfinite(float(value)):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            params, m, v = _adam_step(params, grads, m, v, float(step), cfg.lr, cfg.weight_decay)
        epoch_loss = dataset_loss(params, examples, cfg)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
        trace.append(epoch_loss)
        if progress is not None:
            progress(epoch, epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    return TrainResult(params=params, loss_trace=trace, epochs=cfg.epochs, skipped=skipped)


def infer(trial: Trial, params: ModelParams, cfg: ModelConfig) -> ModelOutput:
    """Run the encoder in eval mode on a normalized, tokenized trial."""
    poses = normalize_sequence(trial).joints
    tokens = tokenize(poses, trial.subject_height, params, cfg)
    return forward(params, tokens, cfg, train_mode=False)


# ---------------------------------------------------------------------------
# checkpoints: a zip of .npy members with a fixed timestamp so identical
# parameters always give identical bytes

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, epochs: int = 0, extra: dict | None = None) -> None:
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "epochs": int(epochs),
            "params": {k: list(np.shape(v)) for k, v in sorted(params.items())}}
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(params):
            info = zipfile.ZipInfo(f"params/{name}.npy", date_time=_ZIP_DATE)
            zf.writestr(info, _npy_bytes(np.asarray(params[name], dtype=np.float64)))


def load_checkpoint(path):
    """Returns ``(params, cfg, meta)``; rejects missing or mis-shaped tensors."""
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        cfg = ModelConfig.from_dict(meta["config"])
        params = {}
        for name, shape in param_shapes(cfg).items():
            member = f"params/{name}.npy"
            if member not in zf.namelist():
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            arr = np.lib.format.read_array(io.BytesIO(zf.read(member)), allow_pickle=False)
            if arr.shape != tuple(shape):
                raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, expected {tuple(shape)}")
            params[name] = jnp.asarray(arr, dtype=jnp.float64)
    return params, cfg, meta
