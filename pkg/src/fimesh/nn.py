"""Mesh layers and the spherical super-resolution models."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from fimesh import autograd as ag
from fimesh.autograd import ParamStore, Tensor
from fimesh.geometry_ops import OperatorSet, build_operators
from fimesh.mesh import FOCUSED, FULL, TriMesh, make_mesh, refinable_faces

PSNR_CAP = 99.0
# Angle subtended by an icosahedron edge.
ICO_EDGE_ANGLE = float(np.arccos(1.0 / np.sqrt(5.0)))


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=None)
def operators_for(level: int, kind: str) -> OperatorSet:
    return build_operators(make_mesh(level, kind))


def nominal_edge_length(level: int) -> float:
    """Arc length of a Level-k edge before midpoint projection."""
    return ICO_EDGE_ANGLE / 2**level


def operator_scales(level: int) -> tuple[float, float, float, float]:
    """Per-branch factors (1, h, h, h^2) that make the operator responses O(1).

    A constant factor on a branch is absorbed by its learned mixing matrix,
    so this changes conditioning, not the set of representable layers.
    """
    h = nominal_edge_length(level)
    return (1.0, h, h, h * h)


@lru_cache(maxsize=None)
def _stacked(level: int, kind: str):
    ops = operators_for(level, kind)
    return sp.vstack(
        [s * op.matrix for s, op in zip(operator_scales(level), ops.as_tuple())], format="csr"
    )


class MeshConv:
    """y = sum_k W_k (D_k x) + b over D = (identity, grad_lat, grad_lng, laplacian).

    ``weight`` has shape (C_out, C_in, 4); ``weight[:, :, k]`` mixes the
    response of operator k. Operators enter pre-multiplied by
    :func:`operator_scales`, so the effective coefficient on the raw
    operator is ``weight[:, :, k] * operator_scales(level)[k]``.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 level: int, kind: str, rng: np.random.Generator):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.level, self.kind = level, kind
        bound = np.sqrt(1.0 / (4 * c_in))
        self.weight = store.add(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in, 4)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out))

    @property
    def n_params(self) -> int:
        return 4 * self.c_in * self.c_out + self.c_out

    def mixing(self, k: int) -> np.ndarray:
        """Effective coefficient matrix on the unscaled operator k."""
        return self.weight.data[:, :, k] * operator_scales(self.level)[k]

    def __call__(self, x: Tensor) -> Tensor:
        b, c, v = x.shape
        if c != self.c_in:
            raise ag.AutogradError(f"{self.name}: expected {self.c_in} channels, got {c}")
        stacked = _stacked(self.level, self.kind)
        if stacked.shape[1] != v:
            raise ag.AutogradError(
                f"{self.name}: bound to a {stacked.shape[1]}-vertex mesh, input has {v}"
            )
        h = ag.reshape(ag.sparse_matvec(stacked, x), (b, 4 * c, v))
        w = ag.reshape(self.weight, (self.c_out, 4 * self.c_in))
        return ag.add(ag.matmul(w, h), ag.reshape(self.bias, (1, self.c_out, 1)))


class MeshConvTranspose:
    """Zero-pad new fine vertices, then MeshConv on the finer mesh."""

    def __init__(self, store, name, c_in, c_out, fine_level, kind, rng):
        self.conv = MeshConv(store, name, c_in, c_out, fine_level, kind, rng)
        self.n_fine = make_mesh(fine_level, kind).n_vertices
        self.n_coarse = make_mesh(fine_level - 1, kind).n_vertices

    @property
    def n_params(self):
        return self.conv.n_params

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.n_coarse:
            raise ag.AutogradError(
                f"transpose conv expects {self.n_coarse} coarse vertices, got {x.shape[2]}"
            )
        return self.conv(ag.pad_vertices(x, self.n_fine))


class BatchNorm:
    def __init__(self, store, name, channels, momentum=ag.BN_MOMENTUM, eps=ag.BN_EPS):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps
        self.channels = channels

    @property
    def n_params(self):
        return 2 * self.channels

    def __call__(self, x, training: bool):
        return ag.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


@dataclass(frozen=True)
class ShufflePlan:
    """Gather plan for one VertexShuffle step between consecutive mesh levels.

    Midpoint row k (fine vertex ``n_coarse + k``) averages channel group
    ``group[k]`` at parents ``parent_a[k]`` and ``parent_b[k]``.
    """

    n_coarse: int
    n_fine: int
    group: np.ndarray
    parent_a: np.ndarray
    parent_b: np.ndarray

    def dense(self) -> np.ndarray:
        """(n_fine, 4 * n_coarse) matrix acting on group-folded columns g*V + v."""
        m = np.zeros((self.n_fine, 4 * self.n_coarse))
        m[np.arange(self.n_coarse), np.arange(self.n_coarse)] = 1.0
        rows = self.n_coarse + np.arange(self.group.size)
        np.add.at(m, (rows, self.group * self.n_coarse + self.parent_a), 0.5)
        np.add.at(m, (rows, self.group * self.n_coarse + self.parent_b), 0.5)
        return m


def shuffle_plan(coarse: TriMesh, fine: TriMesh) -> ShufflePlan:
    if fine.kind != coarse.kind or fine.level != coarse.level + 1:
        raise ConfigError("VertexShuffle needs consecutive levels of the same mesh kind")
    if fine.coarse_vertex_count != coarse.n_vertices:
        raise ConfigError("fine mesh does not extend the coarse mesh")
    n = coarse.n_vertices
    faces = refinable_faces(coarse)
    # slot order per face: (v0,v1) -> 1, (v1,v2) -> 2, (v2,v0) -> 3
    a = faces[:, [0, 1, 2]].reshape(-1)
    b = faces[:, [1, 2, 0]].reshape(-1)
    keys = np.minimum(a, b) * n + np.maximum(a, b)
    uniq, first = np.unique(keys, return_index=True)
    slot_group = first % 3 + 1
    pe = fine.parent_edge[n:]
    mid_keys = pe[:, 0] * n + pe[:, 1]
    pos = np.searchsorted(uniq, mid_keys)
    if np.any(pos >= uniq.size) or np.any(uniq[np.minimum(pos, uniq.size - 1)] != mid_keys):
        raise ConfigError("fine-mesh midpoint has no parent edge among refinable faces")
    return ShufflePlan(n, fine.n_vertices, slot_group[pos].astype(np.int64),
                       pe[:, 0].astype(np.int64), pe[:, 1].astype(np.int64))


@lru_cache(maxsize=None)
def plan_for(level: int, kind: str) -> ShufflePlan:
    """Plan from ``level`` to ``level + 1``."""
    return shuffle_plan(make_mesh(level, kind), make_mesh(level + 1, kind))


def vertex_shuffle(x: Tensor, plan: ShufflePlan) -> Tensor:
    """(B, F, V_i) -> (B, F/4, V_{i+1}) with no trainable parameters."""
    b, f, v = x.shape
    if f % 4:
        raise ag.AutogradError(f"VertexShuffle needs channels divisible by 4, got {f}")
    if v != plan.n_coarse:
        raise ag.AutogradError(f"plan expects {plan.n_coarse} vertices, got {v}")
    y = ag.fold_groups(x, 4)
    kept = ag.gather_rows(y, np.arange(v))
    mids = ag.scatter_mean_pairs(y, plan.group * v + plan.parent_a, plan.group * v + plan.parent_b)
    return ag.concat([kept, mids], axis=-1)


def nearest_upsample(x: np.ndarray, plan: ShufflePlan) -> np.ndarray:
    """Parameter-free reference: midpoints get the mean of their parents."""
    mids = 0.5 * (x[..., plan.parent_a] + x[..., plan.parent_b])
    return np.concatenate([x, mids], axis=-1)


class ResBlock:
    """y = x + conv2(relu(bn(conv1(x))))."""

    def __init__(self, store, name, channels, level, kind, rng, bn_momentum, bn_eps):
        self.conv1 = MeshConv(store, f"{name}.conv1", channels, channels, level, kind, rng)
        self.bn = BatchNorm(store, f"{name}.bn", channels, bn_momentum, bn_eps)
        self.conv2 = MeshConv(store, f"{name}.conv2", channels, channels, level, kind, rng)

    @property
    def n_params(self):
        return self.conv1.n_params + self.bn.n_params + self.conv2.n_params

    def __call__(self, x, training: bool):
        h = ag.relu(self.bn(self.conv1(x), training))
        return ag.add(x, self.conv2(h))


@dataclass
class ModelConfig:
    level_in: int = 7
    channels: int = 64
    up_channels: tuple = (16, 4)
    image_channels: int = 1
    model: str = "ssr"  # or "transpose"
    mesh_kind: str = FOCUSED
    res_blocks: int = 2
    mean_shift: bool = True
    bn_momentum: float = ag.BN_MOMENTUM
    bn_eps: float = ag.BN_EPS
    seed: int = 0

    def __post_init__(self):
        self.up_channels = tuple(int(c) for c in self.up_channels)
        if self.model not in ("ssr", "transpose"):
            raise ConfigError(f"model must be 'ssr' or 'transpose', got {self.model!r}")
        if self.mesh_kind not in (FULL, FOCUSED):
            raise ConfigError(f"unknown mesh kind {self.mesh_kind!r}")
        if len(self.up_channels) != 2 or min(self.up_channels) < 1:
            raise ConfigError("up_channels must be two positive widths")
        if self.channels < 1 or self.image_channels < 1 or self.res_blocks < 0:
            raise ConfigError("channel counts must be positive")
        if self.mesh_kind == FOCUSED and self.level_in < 1:
            raise ConfigError("focused input level must be >= 1")

    @property
    def level_out(self) -> int:
        return self.level_in + 2

    def to_json(self) -> str:
        d = asdict(self)
        d["up_channels"] = list(self.up_channels)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class SSRModel:
    """MeshConv+BN+ReLU, ResBlocks, skip add, two x4 vertex upsamplings, final MeshConv.

    With ``mean_shift`` the per-item, per-channel vertex mean is removed from
    the input and added back to the output (no parameters).

    ``model="ssr"`` upsamples with channel-expanding MeshConv + VertexShuffle;
    ``model="transpose"`` swaps each pair for a MeshConvTranspose with the
    same output width, so the following layers see 4x wider inputs.
    """

    def __init__(self, config: ModelConfig, store: ParamStore | None = None):
        self.config = cfg = config
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        lk, kind, c = cfg.level_in, cfg.mesh_kind, cfg.channels
        s = self.store
        self.head = MeshConv(s, "head", cfg.image_channels, c, lk, kind, rng)
        self.head_bn = BatchNorm(s, "head.bn", c, cfg.bn_momentum, cfg.bn_eps)
        self.blocks = [
            ResBlock(s, f"res{i}", c, lk, kind, rng, cfg.bn_momentum, cfg.bn_eps)
            for i in range(cfg.res_blocks)
        ]
        c1, c2 = cfg.up_channels
        if cfg.model == "ssr":
            self.up1 = MeshConv(s, "up1", c, 4 * c1, lk, kind, rng)
            self.up2 = MeshConv(s, "up2", c1, 4 * c2, lk + 1, kind, rng)
            self.tail = MeshConv(s, "tail", c2, cfg.image_channels, lk + 2, kind, rng)
            self.plans = (plan_for(lk, kind), plan_for(lk + 1, kind))
        else:
            self.up1 = MeshConvTranspose(s, "up1", c, 4 * c1, lk + 1, kind, rng)
            self.up2 = MeshConvTranspose(s, "up2", 4 * c1, 4 * c2, lk + 2, kind, rng)
            self.tail = MeshConv(s, "tail", 4 * c2, cfg.image_channels, lk + 2, kind, rng)
        self.n_in = make_mesh(lk, kind).n_vertices
        self.n_out = make_mesh(lk + 2, kind).n_vertices
        if store is not None:
            self.store.load_from(store)

    @property
    def params(self) -> ParamStore:
        return self.store

    def layers(self):
        yield "head", self.head
        yield "head.bn", self.head_bn
        for i, blk in enumerate(self.blocks):
            yield f"res{i}", blk
        yield "up1", self.up1
        yield "up2", self.up2
        yield "tail", self.tail

    def parameter_ledger(self) -> list[tuple[str, int]]:
        return [(name, layer.n_params) for name, layer in self.layers()]

    def __call__(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != (self.config.image_channels, self.n_in):
            raise ag.AutogradError(
                f"expected input (B, {self.config.image_channels}, {self.n_in}), got {x.shape}"
            )
        mu = None
        if self.config.mean_shift:
            # work on the zero-mean patch and restore its mean at the output
            mu = ag.vertex_mean(x)
            x = ag.add(x, ag.scale(mu, -1.0))
        h = ag.relu(self.head_bn(self.head(x), training))
        r = h
        for blk in self.blocks:
            r = blk(r, training)
        s = ag.add(h, r) if self.blocks else h
        if self.config.model == "ssr":
            u = vertex_shuffle(self.up1(s), self.plans[0])
            u = vertex_shuffle(self.up2(u), self.plans[1])
        else:
            u = self.up2(self.up1(s))
        y = self.tail(u)
        return ag.add(y, mu) if mu is not None else y


def build_ssr(config: ModelConfig) -> SSRModel:
    return SSRModel(ModelConfig(**{**asdict(config), "model": "ssr"}))


def build_baseline(config: ModelConfig) -> SSRModel:
    return SSRModel(ModelConfig(**{**asdict(config), "model": "transpose"}))


def closed_form_param_count(config: ModelConfig) -> int:
    """Hand-derived total; independent of the layer objects."""
    k, c = config.image_channels, config.channels
    c1, c2 = config.up_channels

    def conv(i, o):
        return 4 * i * o + o

    total = conv(k, c) + 2 * c
    total += config.res_blocks * (2 * conv(c, c) + 2 * c)
    if config.model == "ssr":
        total += conv(c, 4 * c1) + conv(c1, 4 * c2) + conv(c2, k)
    else:
        total += conv(c, 4 * c1) + conv(4 * c1, 4 * c2) + conv(4 * c2, k)
    return total


def mse_value(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when MSE is exactly zero."""
    err = mse_value(pred, target)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def psnr_capped(pred, target, peak: float = 1.0) -> float:
    return min(psnr(pred, target, peak), PSNR_CAP)


def log_mse(err: float) -> float:
    """Logged loss form 10 log10(MSE); -inf at zero."""
    return float("-inf") if err == 0.0 else float(10.0 * np.log10(err))
