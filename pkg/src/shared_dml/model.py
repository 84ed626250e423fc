"""Shared feature extractor with two embedding heads and a correlation regressor.

Network layout (weights stored ``(out, in)``, activations as row batches)::

    x --f--> f_vec --phi-------> normalize --> phi_vec
                  \\--phi_star--> normalize --> phi_star_vec --p--> projection

``f`` is a rectifier MLP with a linear output layer; ``p`` is dense, rectifier,
dense.  Gradients are written out by hand for this fixed architecture.  The
decorrelation term reaches the encoders through a gradient reversal: ``p`` is
updated to increase the correlation while ``f``, ``phi`` and ``phi_star``
receive the sign-flipped signal.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from .errors import DegenerateEmbeddingError, DimensionError, TrainingDivergenceError

HEADS = ("class", "shared")
HEAD_PREFIX = {"class": "phi", "shared": "phi_star"}
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    ambient: int
    feature: int
    embed: int
    embed_star: int
    reg_hidden: Optional[int] = None
    f_hidden: tuple = ()

    def __post_init__(self):
        if self.reg_hidden is None:
            object.__setattr__(self, "reg_hidden", 2 * self.embed)
        object.__setattr__(self, "f_hidden", tuple(int(h) for h in self.f_hidden))
        sizes = (self.ambient, self.feature, self.embed, self.embed_star, self.reg_hidden)
        if any(int(s) < 1 for s in sizes + self.f_hidden):
            raise DimensionError("all dimensions must be positive")
        if self.embed < 3 or self.embed_star < 3:
            raise DimensionError("embedding dimensions must be >= 3")

    def layer_shapes(self) -> dict:
        """Map tensor name -> shape, in canonical order."""
        shapes = {}
        widths = (self.ambient,) + self.f_hidden + (self.feature,)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"f.{i}.W"] = (fan_out, fan_in)
            shapes[f"f.{i}.b"] = (fan_out,)
        shapes["phi.W"] = (self.embed, self.feature)
        shapes["phi.b"] = (self.embed,)
        shapes["phi_star.W"] = (self.embed_star, self.feature)
        shapes["phi_star.b"] = (self.embed_star,)
        shapes["p.0.W"] = (self.reg_hidden, self.embed_star)
        shapes["p.0.b"] = (self.reg_hidden,)
        shapes["p.1.W"] = (self.embed, self.reg_hidden)
        shapes["p.1.b"] = (self.embed,)
        return shapes

    @property
    def num_f_layers(self) -> int:
        return len(self.f_hidden) + 1


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict
    # margin-loss boundaries, one per head; updated only when learnable
    beta: dict = field(default_factory=lambda: {"class": 0.6, "shared": 0.6})

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dims, {k: v.copy() for k, v in self.tensors.items()}, dict(self.beta)
        )

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.dims == other.dims
            and self.beta == other.beta
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )


def _draw(name: str, shape, seed: int) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = shape[1]
    bound = math.sqrt(6.0 / fan_in)
    # one substream per tensor so a single head can be re-drawn in isolation
    key = int.from_bytes(name.encode(), "little")
    rng = np.random.default_rng([seed, key])
    return rng.uniform(-bound, bound, size=shape)


def init_params(dims: ModelDims, seed: int, beta: float = 0.6) -> ModelParams:
    tensors = {name: _draw(name, shape, seed) for name, shape in dims.layer_shapes().items()}
    return ModelParams(dims, tensors, {"class": beta, "shared": beta})


def reinit_encoder(params: ModelParams, head: str, seed: int) -> ModelParams:
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    out = params.copy()
    prefix = HEAD_PREFIX[head]
    shapes = params.dims.layer_shapes()
    for suffix in (".W", ".b"):
        name = prefix + suffix
        out.tensors[name] = _draw(name, shapes[name], seed)
    return out


def _relu(z):
    return np.maximum(z, 0.0)


def _as_batch(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width or x.ndim not in (1, 2):
        raise DimensionError(f"{what}: expected trailing length {width}, got shape {x.shape}")
    return x


def _f_forward(params: ModelParams, X):
    """Return (output, layer inputs, pre-activations) for the backward pass."""
    inputs, pre = [], []
    h = X
    n_layers = params.dims.num_f_layers
    for i in range(n_layers):
        inputs.append(h)
        z = h @ params[f"f.{i}.W"].T + params[f"f.{i}.b"]
        pre.append(z)
        h = _relu(z) if i < n_layers - 1 else z
    return h, inputs, pre


def forward_features(params: ModelParams, x) -> np.ndarray:
    x = _as_batch(x, params.dims.ambient, "forward_features")
    return _f_forward(params, x)[0]


def _head_raw(params: ModelParams, f_vec, head: str):
    prefix = HEAD_PREFIX[head]
    return f_vec @ params[prefix + ".W"].T + params[prefix + ".b"]


def _normalize(u):
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("linear head output is the zero vector")
    return u / norms, norms


def embed(params: ModelParams, f_vec, head: str = "class") -> np.ndarray:
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    f_vec = _as_batch(f_vec, params.dims.feature, "embed")
    return _normalize(_head_raw(params, f_vec, head))[0]


def embed_inputs(params: ModelParams, X, head: str = "class") -> np.ndarray:
    return embed(params, forward_features(params, X), head)


def _p_forward(params: ModelParams, S):
    z = S @ params["p.0.W"].T + params["p.0.b"]
    a = _relu(z)
    return a @ params["p.1.W"].T + params["p.1.b"], z, a


def regressor_forward(params: ModelParams, phi_star_vec) -> np.ndarray:
    S = _as_batch(phi_star_vec, params.dims.embed_star, "regressor_forward")
    return _p_forward(params, S)[0]


@dataclass
class Tape:
    """Record of one forward evaluation of a loss term.

    ``triplets`` index rows of ``X``.  ``head`` names the encoder carrying
    the ranking loss (``None`` for a decorrelation-only term).
    """

    X: np.ndarray
    triplets: np.ndarray
    head: Optional[str]
    loss_cfg: losses.LossConfig
    decorrelate: bool
    dims: ModelDims
    f_out: np.ndarray = None
    f_inputs: list = None
    f_pre: list = None
    emb: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    decor_rows: np.ndarray = None
    p_cache: tuple = None
    ranking: float = 0.0
    r: float = 0.0
    loss: float = 0.0


def forward_loss(
    params: ModelParams,
    X,
    triplets,
    head: Optional[str],
    loss_cfg: losses.LossConfig,
    decorrelate: bool = False,
) -> Tape:
    """Evaluate ``mean ranking loss - gamma * mean r`` on one batch.

    ``r`` is averaged over every row referenced by a triplet.
    """
    X = _as_batch(X, params.dims.ambient, "forward_loss")
    if X.ndim != 2:
        raise DimensionError("forward_loss expects a batch of rows")
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if head is not None and head not in HEADS:
        raise ValueError(f"head must be one of {HEADS} or None")
    if triplets.size and (triplets.min() < 0 or triplets.max() >= X.shape[0]):
        raise DimensionError("triplet index outside the batch")

    tape = Tape(X, triplets, head, loss_cfg, decorrelate, params.dims)
    tape.f_out, tape.f_inputs, tape.f_pre = _f_forward(params, X)
    needed = set(HEADS) if decorrelate else ({head} if head else set())
    for h in sorted(needed):
        tape.emb[h], tape.norms[h] = _normalize(_head_raw(params, tape.f_out, h))

    if head is not None and len(triplets):
        E = tape.emb[head]
        a, p, n = E[triplets[:, 0]], E[triplets[:, 1]], E[triplets[:, 2]]
        if loss_cfg.kind == "triplet":
            values = losses.triplet_terms(a, p, n, loss_cfg.alpha)[0]
        else:
            values = losses.margin_terms(a, p, n, loss_cfg.alpha, params.beta[head])[0]
        tape.ranking = float(np.mean(values))

    if decorrelate:
        rows = np.unique(triplets) if len(triplets) else np.arange(X.shape[0])
        tape.decor_rows = rows
        proj, z, act = _p_forward(params, tape.emb["shared"][rows])
        tape.p_cache = (proj, z, act)
        r = losses.correlation_terms(tape.emb["class"][rows], proj)[0]
        tape.r = float(np.mean(r))

    tape.loss = tape.ranking - loss_cfg.gamma * tape.r
    return tape


def backward(params: ModelParams, tape: Tape, reverse: bool = True) -> dict:
    """Analytic gradients of the taped loss.

    With ``reverse`` the decorrelation gradient is sign-flipped where it
    leaves the regressor's inputs, so encoder-side tensors get the gradient
    of ``ranking + gamma * r`` while ``p`` gets that of ``ranking - gamma * r``.
    Also returns ``"beta.<head>"`` entries for the margin boundary.
    """
    if tape.dims != params.dims:
        raise RuntimeError("tape was recorded with different model dimensions")
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    grads["beta.class"] = 0.0
    grads["beta.shared"] = 0.0
    cfg = tape.loss_cfg
    d_emb = {h: np.zeros_like(e) for h, e in tape.emb.items()}

    T = len(tape.triplets)
    if tape.head is not None and T:
        E = tape.emb[tape.head]
        ia, ip, i_n = tape.triplets.T
        a, p, n = E[ia], E[ip], E[i_n]
        if cfg.kind == "triplet":
            _, dA, dP, dN = losses.triplet_terms(a, p, n, cfg.alpha)
        else:
            _, dA, dP, dN, dbeta = losses.margin_terms(a, p, n, cfg.alpha, params.beta[tape.head])
            if cfg.learn_beta:
                grads["beta." + tape.head] = float(np.sum(dbeta)) / T
        target = d_emb[tape.head]
        np.add.at(target, ia, dA / T)
        np.add.at(target, ip, dP / T)
        np.add.at(target, i_n, dN / T)

    if tape.decorrelate and cfg.gamma != 0:
        rows = tape.decor_rows
        proj, z, act = tape.p_cache
        _, dPhi, dProj = losses.correlation_terms(tape.emb["class"][rows], proj)
        scale = -cfg.gamma / len(rows)
        g_proj = scale * dProj
        grads["p.1.W"] = g_proj.T @ act
        grads["p.1.b"] = g_proj.sum(axis=0)
        g_z = (g_proj @ params["p.1.W"]) * (z > 0)
        grads["p.0.W"] = g_z.T @ tape.emb["shared"][rows]
        grads["p.0.b"] = g_z.sum(axis=0)
        g_star = g_z @ params["p.0.W"]
        g_phi = scale * dPhi
        if reverse:
            g_star = -g_star
            g_phi = -g_phi
        d_emb["class"][rows] += g_phi
        d_emb["shared"][rows] += g_star

    d_f = np.zeros_like(tape.f_out)
    for h, e in tape.emb.items():
        g = d_emb[h]
        du = (g - e * np.sum(e * g, axis=1, keepdims=True)) / tape.norms[h]
        prefix = HEAD_PREFIX[h]
        grads[prefix + ".W"] = du.T @ tape.f_out
        grads[prefix + ".b"] = du.sum(axis=0)
        d_f += du @ params[prefix + ".W"]

    g = d_f
    for i in reversed(range(params.dims.num_f_layers)):
        if i < params.dims.num_f_layers - 1:
            g = g * (tape.f_pre[i] > 0)
        grads[f"f.{i}.W"] = g.T @ tape.f_inputs[i]
        grads[f"f.{i}.b"] = g.sum(axis=0)
        if i:
            g = g @ params[f"f.{i}.W"]
    return grads


def is_encoder_tensor(name: str) -> bool:
    return name.startswith(("f.", "phi.", "phi_star."))


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state.

    ``lr_overrides`` maps a tensor-name prefix (e.g. ``"p."``) to its own
    learning rate.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_overrides: dict = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr


def optimizer_step(params: ModelParams, grads: dict, state: OptimizerState):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", params)
    t = state.step + 1
    new_params = params.copy()
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t

    def update(name, value, g):
        m_new = state.beta1 * m.get(name, 0.0) + (1.0 - state.beta1) * g
        v_new = state.beta2 * v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        m[name], v[name] = m_new, v_new
        step = state.lr_for(name) * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
        return value - step

    for name, value in params.tensors.items():
        new_params.tensors[name] = update(name, value, grads[name])
    for head in HEADS:
        key = "beta." + head
        if key in grads:
            new_params.beta[head] = float(update(key, params.beta[head], grads[key]))
    return new_params, replace(state, step=t, m=m, v=v)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write an ``.npz`` archive.

    Layout: ``__meta__`` holds a JSON string with ``version``, ``dims``
    and ``beta``; every other entry is one parameter tensor under its
    canonical name (``f.0.W``, ``phi.b``, ...).
    """
    d = params.dims
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": {
            "ambient": d.ambient,
            "feature": d.feature,
            "embed": d.embed,
            "embed_star": d.embed_star,
            "reg_hidden": d.reg_hidden,
            "f_hidden": list(d.f_hidden),
        },
        "beta": params.beta,
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.tensors)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        dims = ModelDims(**meta["dims"])
        tensors = {}
        for name, shape in dims.layer_shapes().items():
            if name not in archive.files:
                raise ValueError(f"checkpoint lacks tensor {name}")
            arr = np.array(archive[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            tensors[name] = arr
    return ModelParams(dims, tensors, {k: float(v) for k, v in meta["beta"].items()})
