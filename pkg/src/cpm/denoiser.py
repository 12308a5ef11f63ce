"""Primitive noise-prediction network.

Four tokens (anchor part, function part, start pose, end pose), each the
concatenation of a 200-d feature, a learned 16-d position embedding and a
40-d sinusoidal time embedding, pass through a pre-norm transformer trunk;
a shared linear head reads a 6-d noise estimate off each pose token.

The part encoder is a per-point MLP followed by one induced self-attention
layer (points exchange information through a few learned inducing
queries), a max-pool and a linear map to the feature width.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .cloud import PartCloud
from .difftensor import Array
from .errors import CheckpointError, ShapeMismatch


@dataclass(frozen=True)
class DenoiserConfig:
    point_feat_dim: int = 200
    pos_emb_dim: int = 16
    time_emb_dim: int = 40
    pose_feat_dim: int = 200
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    n_poses: int = 2
    n_points: int = 512
    enc_dims: tuple = (64, 128)
    n_inducing: int = 16
    enc_key_dim: int = 32
    pose_hidden: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "enc_dims", tuple(self.enc_dims))
        if self.point_feat_dim != self.pose_feat_dim:
            raise ShapeMismatch(
                f"part tokens ({self.point_feat_dim}+{self.pos_emb_dim}+{self.time_emb_dim}) and pose tokens "
                f"({self.pose_feat_dim}+{self.pos_emb_dim}+{self.time_emb_dim}) must have equal width"
            )
        if self.width % self.heads:
            raise ShapeMismatch(f"token width {self.width} not divisible by {self.heads} heads")
        if self.time_emb_dim % 2:
            raise ShapeMismatch("time embedding width must be even")

    @property
    def width(self) -> int:
        return self.point_feat_dim + self.pos_emb_dim + self.time_emb_dim

    @property
    def n_tokens(self) -> int:
        return 2 + self.n_poses

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_dims"] = list(self.enc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def reduced_config(**overrides) -> DenoiserConfig:
    """Small network for gradient checks and fast tests."""
    base = dict(
        point_feat_dim=24,
        pos_emb_dim=4,
        time_emb_dim=4,
        pose_feat_dim=24,
        layers=2,
        heads=4,
        hidden_dim=32,
        n_points=16,
        enc_dims=(16, 32),
        n_inducing=4,
        enc_key_dim=8,
        pose_hidden=32,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def time_embedding(t, dim: int = 40) -> np.ndarray:
    """Interleaved (sin, cos) pairs; pair k uses frequency 10000^(-k/(dim/2-1)).

    Frequencies run geometrically from 1 down to 1/10000. Accepts a scalar
    step or an array of steps (output gains a trailing axis).
    """
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _linear(x: Array, w: Array, b: Array | None = None) -> Array:
    y = dt.matmul(x, w)
    return y if b is None else dt.add(y, b)


class DenoiserModel:
    """Named parameter arrays of one primitive model plus its config."""

    def __init__(self, config: DenoiserConfig, relation: str, params: dict[str, Array] | None = None, meta: dict | None = None):
        self.config = config
        self.relation = relation
        self.params = params if params is not None else {}
        self.meta = dict(meta or {})

    # construction

    @classmethod
    def init(cls, config: DenoiserConfig, relation: str, rng: np.random.Generator) -> "DenoiserModel":
        c = config
        std = c.init_std
        shapes = {}
        e1, e2 = c.enc_dims
        shapes.update(
            {
                "hp.w1": (3, e1), "hp.b1": (e1,),
                "hp.w2": (e1, e2), "hp.b2": (e2,),
                "hp.inducing": (c.n_inducing, e2),
                "hp.wq1": (e2, c.enc_key_dim), "hp.wk1": (e2, c.enc_key_dim), "hp.wv1": (e2, e2),
                "hp.wq2": (e2, c.enc_key_dim), "hp.wk2": (e2, c.enc_key_dim), "hp.wv2": (e2, e2),
                "hp.wo": (e2, c.point_feat_dim), "hp.bo": (c.point_feat_dim,),
                "hT.w1": (6, c.pose_hidden), "hT.b1": (c.pose_hidden,),
                "hT.w2": (c.pose_hidden, c.pose_feat_dim), "hT.b2": (c.pose_feat_dim,),
                "hpos": (c.n_tokens, c.pos_emb_dim),
            }
        )
        w = c.width
        for i in range(c.layers):
            p = f"trunk.{i}."
            shapes.update(
                {
                    p + "ln1.g": (w,), p + "ln1.b": (w,),
                    p + "wq": (w, w), p + "wk": (w, w), p + "wv": (w, w),
                    p + "wo": (w, w), p + "bo": (w,),
                    p + "ln2.g": (w,), p + "ln2.b": (w,),
                    p + "ff1": (w, c.hidden_dim), p + "fb1": (c.hidden_dim,),
                    p + "ff2": (c.hidden_dim, w), p + "fb2": (w,),
                }
            )
        shapes.update({"ln.g": (w,), "ln.b": (w,), "head.w": (w, 6), "head.b": (6,)})
        params = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf.startswith("b") or leaf.startswith("fb"):
                data = np.zeros(shape)
            else:
                data = dt.truncated_normal(rng, shape, std)
            params[name] = Array(data, requires_grad=True, name=name)
        return cls(config, relation, params)

    def groups(self) -> dict[str, list[str]]:
        """Parameter names by component (h_p, h_T, h_pos, trunk, head)."""
        out = {"h_p": [], "h_T": [], "h_pos": [], "trunk": [], "head": []}
        for name in self.params:
            if name.startswith("hp."):
                out["h_p"].append(name)
            elif name.startswith("hT."):
                out["h_T"].append(name)
            elif name == "hpos":
                out["h_pos"].append(name)
            elif name.startswith("trunk.") or name.startswith("ln."):
                out["trunk"].append(name)
            else:
                out["head"].append(name)
        return out

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # forward pieces

    def encode_points(self, pts) -> Array:
        """(B, N, 3) centered points -> (B, point_feat_dim)."""
        P = self.params
        x = pts if isinstance(pts, Array) else Array(pts)
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ShapeMismatch(f"encoder expects (batch, points, 3), got {x.shape}")
        b = x.shape[0]
        h = dt.relu(_linear(x, P["hp.w1"], P["hp.b1"]))
        h = dt.relu(_linear(h, P["hp.w2"], P["hp.b2"]))
        ind = dt.expand(P["hp.inducing"], (b,))
        # attention is linear in its values, so the value map runs after
        # pooling onto the few inducing rows rather than on every point
        summary = dt.matmul(dt.attention(dt.matmul(ind, P["hp.wq1"]), dt.matmul(h, P["hp.wk1"]), h), P["hp.wv1"])
        mixed = dt.attention(
            dt.matmul(h, P["hp.wq2"]), dt.matmul(summary, P["hp.wk2"]), dt.matmul(summary, P["hp.wv2"])
        )
        h = dt.add(h, mixed)
        return _linear(dt.max_reduce(h, axis=1), P["hp.wo"], P["hp.bo"])

    def encode_twists(self, xi) -> Array:
        """(..., 6) twists -> (..., pose_feat_dim)."""
        P = self.params
        x = xi if isinstance(xi, Array) else Array(xi)
        h = dt.relu(_linear(x, P["hT.w1"], P["hT.b1"]))
        return _linear(h, P["hT.w2"], P["hT.b2"])

    def trunk(self, feat_a: Array, feat_f: Array, xi, t) -> Array:
        """Part features (B, F), noisy twists (B, n_poses, 6), steps (B,) -> noise (B, n_poses, 6)."""
        c = self.config
        P = self.params
        xi = xi if isinstance(xi, Array) else Array(xi)
        b = xi.shape[0]
        if xi.shape[1:] != (c.n_poses, 6):
            raise ShapeMismatch(f"expected noisy twists (batch, {c.n_poses}, 6), got {xi.shape}")
        if feat_a.shape != (b, c.point_feat_dim) or feat_f.shape != (b, c.point_feat_dim):
            raise ShapeMismatch(f"part features {feat_a.shape}, {feat_f.shape} vs batch {b}")
        pose_feat = self.encode_twists(xi)
        feats = dt.concat(
            [dt.reshape(feat_a, (b, 1, c.point_feat_dim)), dt.reshape(feat_f, (b, 1, c.point_feat_dim)), pose_feat],
            axis=1,
        )
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = np.broadcast_to(time_embedding(t, c.time_emb_dim)[:, None, :], (b, c.n_tokens, c.time_emb_dim))
        x = dt.concat([feats, dt.expand(P["hpos"], (b,)), Array(np.ascontiguousarray(temb))], axis=-1)
        for i in range(c.layers):
            p = f"trunk.{i}."
            y = dt.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            a = dt.attention(dt.matmul(y, P[p + "wq"]), dt.matmul(y, P[p + "wk"]), dt.matmul(y, P[p + "wv"]), c.heads)
            x = dt.add(x, _linear(a, P[p + "wo"], P[p + "bo"]))
            y = dt.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            y = _linear(dt.relu(_linear(y, P[p + "ff1"], P[p + "fb1"])), P[p + "ff2"], P[p + "fb2"])
            x = dt.add(x, y)
        x = dt.layer_norm(x, P["ln.g"], P["ln.b"])
        return _linear(dt.getitem(x, (slice(None), slice(2, None))), P["head.w"], P["head.b"])

    def forward(self, anchor_pts, function_pts, xi, t) -> Array:
        return self.trunk(self.encode_points(anchor_pts), self.encode_points(function_pts), xi, t)

    # persistence

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, meta: dict | None = None) -> None:
        header = {
            "kind": "cpm-denoiser",
            "relation": self.relation,
            "config": self.config.to_dict(),
            "meta": {**self.meta, **(meta or {})},
        }
        dt.save_checkpoint(path, self.state(), header)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        arrays, head = dt.load_checkpoint(path)
        if head.get("kind") != "cpm-denoiser":
            raise CheckpointError(f"{path}: not a denoiser checkpoint")
        config = DenoiserConfig.from_dict(head["config"])
        model = cls.init(config, head["relation"], np.random.default_rng(0))
        missing = set(model.params) ^ set(arrays)
        if missing:
            raise CheckpointError(f"{path}: parameter manifest mismatch: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {model.params[name].shape}")
            model.params[name] = Array(arr, requires_grad=True, name=name)
        model.meta = head.get("meta", {})
        return model


def encode_part(model: DenoiserModel, pc: PartCloud) -> np.ndarray:
    return model.encode_points(pc.points[None]).data[0]


def encode_pose(model: DenoiserModel, xi) -> np.ndarray:
    """One twist (6,) or a stack (n, 6) -> (pose_feat_dim,) or (n, pose_feat_dim)."""
    xi = np.asarray(xi, dtype=np.float64)
    out = model.encode_twists(xi.reshape(-1, 6)).data
    return out.reshape(xi.shape[:-1] + (out.shape[-1],))


def predict_noise(model: DenoiserModel, anchor: PartCloud, function: PartCloud, noisy_twists, t: int) -> np.ndarray:
    """Noise estimate (n_poses, 6) for one pair of part clouds."""
    xi = np.asarray(noisy_twists, dtype=np.float64)
    if xi.shape != (model.config.n_poses, 6):
        raise ShapeMismatch(f"expected ({model.config.n_poses}, 6) noisy twists, got {xi.shape}")
    out = model.forward(anchor.points[None], function.points[None], xi[None], np.array([t]))
    return out.data[0]



def gradient_pairs(model: DenoiserModel, rng: np.random.Generator, batch: int = 2, max_coords: int = 200, h: float = 1e-6) -> dict:
    """Reverse-mode and central-difference gradients of a random linear
    readout of the full forward pass: ``{name: (g_ad, g_fd)}`` over up to
    ``max_coords`` sampled coordinates of each parameter array."""
    c = model.config
    a = rng.normal(size=(batch, c.n_points, 3))
    f = rng.normal(size=(batch, c.n_points, 3))
    xi = rng.normal(size=(batch, c.n_poses, 6))
    t = rng.integers(1, 201, size=batch)
    w = rng.normal(size=(batch, c.n_poses, 6))

    def loss():
        return dt.sum_all(dt.mul(model.forward(a, f, xi, t), w))

    with dt.Tape() as tape:
        out = loss()
    grads = tape.backward(out, list(model.params.values()))
    pairs = {}
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(loss().data)
            flat[i] = keep - h
            fm = float(loss().data)
            flat[i] = keep
            fd[j] = (fp - fm) / (2.0 * h)
        pairs[name] = (grads[p].reshape(-1)[idx], fd)
    return pairs


def coordinate_error(ad: np.ndarray, fd: np.ndarray) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)."""
    return float((np.abs(ad - fd) / np.maximum(1e-12, np.abs(ad) + np.abs(fd))).max())


def norm_error(ad: np.ndarray, fd: np.ndarray) -> float:
    """||g_ad - g_fd|| / max(||g_ad||, ||g_fd||).

    Unlike the per-coordinate ratio it is not dominated by entries whose
    true gradient sits at the level of floating-point cancellation.
    """
    return float(np.linalg.norm(ad - fd) / max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-300))


def gradient_error(model: DenoiserModel, rng: np.random.Generator, batch: int = 2, max_coords: int = 200, h: float = 1e-6) -> dict[str, float]:
    """Per-array :func:`norm_error` of :func:`gradient_pairs`."""
    return {name: norm_error(ad, fd) for name, (ad, fd) in gradient_pairs(model, rng, batch, max_coords, h).items()}
