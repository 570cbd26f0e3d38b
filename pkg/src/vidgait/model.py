"""Gait transformer: tokenization, encoder, 17-channel head and losses.

Parameters are a flat ``dict`` of JAX arrays keyed by name, which makes
them a pytree for ``jax.grad`` and trivially serializable.  Everything runs
in float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from .core import KIN_INDEX, N_JOINTS, N_KIN  # noqa: E402

N_OUT = N_KIN + 8
ANGLE_CHANNELS = tuple(KIN_INDEX[k] for k in ("hip_flex_l", "hip_flex_r", "knee_flex_l", "knee_flex_r"))
_FOOT = ((KIN_INDEX["foot_pos_l"], KIN_INDEX["foot_vel_l"]), (KIN_INDEX["foot_pos_r"], KIN_INDEX["foot_vel_r"]))
_PELVIS_VEL = KIN_INDEX["pelvis_vel"]

ModelParams = Dict[str, jnp.ndarray]


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    embed_dim: int = 32
    mlp_hidden: int = 64
    dropout_p: float = 0.1
    lr: float = 3e-3
    epochs: int = 50
    consistency_weight: float = 1e-4
    seed: int = 0
    # (max sequence length, batch size); trials are cropped to a bucket length
    buckets: tuple = ((60, 4), (120, 4), (180, 4), (240, 4), (300, 4))
    weight_decay: float = 0.0
    layer_scale_init: float = 1e-2
    # per-head attention width; defaults to embed_dim / heads
    head_dim: int | None = None

    def __post_init__(self):
        if self.head_dim is None and self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads unless head_dim is given")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")
        object.__setattr__(self, "buckets", tuple(sorted((int(a), int(b)) for a, b in self.buckets)))

    @property
    def attn_dim(self) -> int:
        return self.heads * (self.head_dim or self.embed_dim // self.heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = [list(b) for b in self.buckets]
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        if "buckets" in d:
            d["buckets"] = tuple(tuple(b) for b in d["buckets"])
        return cls(**d)


FULL_CONFIG = ModelConfig(
    layers=6, heads=6, embed_dim=256, mlp_hidden=512, dropout_p=0.1, lr=1e-4, epochs=150,
    consistency_weight=1e-4, head_dim=64,
    buckets=((30, 128), (60, 112), (90, 96), (120, 80), (150, 72), (180, 64), (210, 56), (240, 48),
             (270, 40), (300, 32)),
)


def param_shapes(cfg: ModelConfig) -> dict:
    D, M, A = cfg.embed_dim, cfg.mlp_hidden, cfg.attn_dim
    flat_in = N_JOINTS * 3
    shapes = {
        "in.w1": (flat_in, D), "in.b1": (D,), "in.w2": (D, D), "in.b2": (D,),
        "height.w1": (1, D), "height.b1": (D,), "height.w2": (D, D), "height.b2": (D,),
        "height.pos": (D,),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "wq": (D, A), p + "bq": (A,), p + "wk": (D, A), p + "bk": (A,),
            p + "wv": (D, A), p + "bv": (A,), p + "wo": (A, D), p + "bo": (D,),
            p + "ls1": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ff.w1": (D, M), p + "ff.b1": (M,), p + "ff.w2": (M, D), p + "ff.b2": (D,),
            p + "ls2": (D,),
        })
    shapes.update({"final.ln.g": (D,), "final.ln.b": (D,), "head.w": (D, N_OUT), "head.b": (N_OUT,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            val = np.ones(shape)
        elif leaf.startswith("ls"):
            val = np.full(shape, cfg.layer_scale_init)
        elif name == "height.pos":
            val = rng.normal(0.0, 0.02, shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            val = rng.uniform(-bound, bound, shape)
        else:
            val = np.zeros(shape)
        params[name] = jnp.asarray(val, dtype=jnp.float64)
    return params


def sinusoidal_encoding(n: int, dim: int) -> jnp.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return jnp.asarray(pe)


def _mlp(params, prefix, x):
    h = jax.nn.gelu(x @ params[prefix + ".w1"] + params[prefix + ".b1"], approximate=False)
    return h @ params[prefix + ".w2"] + params[prefix + ".b2"]


def tokenize(poses, height, params: ModelParams, cfg: ModelConfig) -> jnp.ndarray:
    """(T, 10, 3) canonical joints + height -> (T + 1, D) tokens, height token last."""
    poses = jnp.asarray(poses)
    T = poses.shape[0]
    if T < 1:
        raise ValueError("need at least one frame")
    flat = poses.reshape(T, N_JOINTS * 3)
    frame_tokens = _mlp(params, "in", flat) + sinusoidal_encoding(T, cfg.embed_dim)
    h = jnp.reshape(jnp.asarray(height, dtype=jnp.float64), (1, 1))
    height_token = _mlp(params, "height", h) + params["height.pos"]
    return jnp.concatenate([frame_tokens, height_token], axis=0)


def _layer_norm(x, g, b, eps=1e-6):
    mu = jnp.mean(x, axis=-1, keepdims=True)
    var = jnp.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / jnp.sqrt(var + eps) * g + b


def _dropout(x, p, key):
    if key is None or p == 0.0:
        return x
    keep = jax.random.bernoulli(key, 1.0 - p, x.shape)
    return jnp.where(keep, x / (1.0 - p), 0.0)


def _attention(params, p, x, heads):
    N = x.shape[0]
    hd = params[p + "wq"].shape[1] // heads
    q = (x @ params[p + "wq"] + params[p + "bq"]).reshape(N, heads, hd)
    k = (x @ params[p + "wk"] + params[p + "bk"]).reshape(N, heads, hd)
    v = (x @ params[p + "wv"] + params[p + "bv"]).reshape(N, heads, hd)
    scores = jnp.einsum("nhd,mhd->hnm", q, k) / jnp.sqrt(hd)
    att = jax.nn.softmax(scores, axis=-1)
    out = jnp.einsum("hnm,mhd->nhd", att, v).reshape(N, heads * hd)
    return out @ params[p + "wo"] + params[p + "bo"]


def encode_tokens(params: ModelParams, tokens, cfg: ModelConfig, key=None):
    """Pre-norm encoder stack; returns (T, 17) raw outputs and per-layer finiteness flags."""
    x = tokens
    flags = []
    keys = [None] * (3 * cfg.layers) if key is None else list(jax.random.split(key, 3 * cfg.layers))
    for i in range(cfg.layers):
        p = f"layer{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        a = _dropout(_attention(params, p, h, cfg.heads), cfg.dropout_p, keys[3 * i])
        x = x + params[p + "ls1"] * a
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = jax.nn.gelu(h @ params[p + "ff.w1"] + params[p + "ff.b1"], approximate=False)
        h = _dropout(h, cfg.dropout_p, keys[3 * i + 1])
        h = _dropout(h @ params[p + "ff.w2"] + params[p + "ff.b2"], cfg.dropout_p, keys[3 * i + 2])
        x = x + params[p + "ls2"] * h
        flags.append(jnp.all(jnp.isfinite(x)))
    x = _layer_norm(x, params["final.ln.g"], params["final.ln.b"])
    out = x[:-1] @ params["head.w"] + params["head.b"]
    return out, jnp.stack(flags)


@dataclass(frozen=True)
class ModelOutput:
    kinematics: np.ndarray  # T x 9, angles in degrees
    phase_q: np.ndarray  # T x 8

    @classmethod
    def from_raw(cls, raw) -> "ModelOutput":
        raw = np.asarray(raw)
        kin = raw[:, :N_KIN].copy()
        kin[:, ANGLE_CHANNELS] = np.degrees(kin[:, ANGLE_CHANNELS])
        return cls(kinematics=kin, phase_q=raw[:, N_KIN:].copy())


def forward(params: ModelParams, tokens, cfg: ModelConfig, train_mode: bool = False,
            rng_seed: int = 0) -> ModelOutput:
    key = jax.random.PRNGKey(rng_seed) if train_mode else None
    raw, flags = _encode_jit(params, tokens, cfg, key)
    flags = np.asarray(flags)
    if not flags.all():
        raise NonFiniteError(f"non-finite activation after layer {int(np.argmin(flags))}")
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("non-finite value in output head")
    return ModelOutput.from_raw(raw)


_encode_jit = jax.jit(encode_tokens, static_argnums=(2,))


# ---------------------------------------------------------------------------
# losses; kinematic angles are in radians here


def consistency_error(kin, dt: float):
    """(T-1) x 2 foot/pelvis velocity mismatch in m/s (left, right)."""
    kin = jnp.asarray(kin)
    cols = []
    for pos, vel in _FOOT:
        cols.append((kin[:-1, vel] - kin[:-1, _PELVIS_VEL]) - (kin[1:, pos] - kin[:-1, pos]) / dt)
    return jnp.stack(cols, axis=1)


def loss_terms(raw, kin_target, q_target, weights, dt: float):
    """(kinematic MSE, weighted phase MSE, mean squared consistency error)."""
    kin = raw[:, :N_KIN]
    q = raw[:, N_KIN:]
    kin_term = jnp.mean((kin - kin_target) ** 2)
    w8 = jnp.repeat(weights, 2, axis=-1)
    mean_w = jnp.mean(w8)
    wse = jnp.mean(w8 * (q - q_target) ** 2)
    phase_term = jnp.where(mean_w > 0, wse / jnp.where(mean_w > 0, mean_w, 1.0), 0.0)
    if kin.shape[0] >= 2:
        cons_term = jnp.mean(consistency_error(kin, dt) ** 2)
    else:
        cons_term = jnp.zeros(())
    return kin_term, phase_term, cons_term


def loss_from_raw(raw, kin_target, q_target, weights, lam: float, dt: float):
    k, p, c = loss_terms(raw, kin_target, q_target, weights, dt)
    return k + p + lam * c


def loss(out: ModelOutput, kin_target, q_target, weights, lam: float, dt: float) -> float:
    """Scalar training loss for API-level outputs (angles in degrees)."""
    raw = np.concatenate([to_internal(out.kinematics), out.phase_q], axis=1)
    val = float(loss_from_raw(jnp.asarray(raw), jnp.asarray(to_internal(kin_target)),
                              jnp.asarray(q_target), jnp.asarray(weights), lam, dt))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite loss")
    return val


def to_internal(kin) -> np.ndarray:
    kin = np.array(kin, dtype=float)
    kin[..., ANGLE_CHANNELS] = np.radians(kin[..., ANGLE_CHANNELS])
    return kin


def batch_loss(params: ModelParams, batch, cfg: ModelConfig, key=None):
    """Mean loss over a same-length batch.

    ``batch`` holds arrays ``poses`` (B, T, 10, 3), ``height`` (B,),
    ``kin`` (B, T, 9, internal units), ``q`` (B, T, 8), ``w`` (B, T, 4) and a
    float ``dt``.
    """
    dt = batch["dt"]

    def one(poses, height, kin, q, w, k):
        tokens = tokenize(poses, height, params, cfg)
        raw, _ = encode_tokens(params, tokens, cfg, k)
        return loss_from_raw(raw, kin, q, w, cfg.consistency_weight, dt)

    B = batch["poses"].shape[0]
    if key is None:
        losses = jax.vmap(lambda a, b, c, d, e: one(a, b, c, d, e, None))(
            batch["poses"], batch["height"], batch["kin"], batch["q"], batch["w"])
    else:
        keys = jax.random.split(key, B)
        losses = jax.vmap(one)(batch["poses"], batch["height"], batch["kin"], batch["q"], batch["w"], keys)
    return jnp.mean(losses)
