"""A small LRU-style sequence model in NumPy with exact reverse-mode gradients.

Architecture: linear embedding, then ``depth`` residual blocks
``u <- u + dropout(act(lru(norm(u))))``, pooling over time and a linear head.
Each ``lru`` is a complex diagonal linear recurrence

    s[k] = lam * s[k-1] + B u[k],     y[k] = Re(C s[k]) + D * u[k]

with ``lam = exp(-exp(nu) + i theta)`` so ``|lam| < 1`` for any real ``nu``.
Arrays are batch-first and time-major: ``(batch, L, features)``.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import List, Optional

import numpy as np

from .exceptions import DimensionError, InvariantError, NumericalError
from .lti import DiagonalSystem
from .scan import linear_scan

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

RECURRENT_SUFFIXES = ("nu", "theta", "B.re", "B.im", "C.re", "C.im", "D")


@dataclass
class ModelConfig:
    d_in: int
    d_out: int
    H: int = 16
    n: int = 16
    depth: int = 1
    norm: str = "layer"           # "layer" | "none"
    activation: str = "gelu"      # "gelu" | "identity"
    pooling: str = "mean"         # "mean" | "last" | "none"
    dropout: float = 0.0
    r_min: float = 0.4
    r_max: float = 0.99
    max_phase: float = 2 * np.pi

    def __post_init__(self):
        if self.norm not in ("layer", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("mean", "last", "none"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


@dataclass
class LruBlock:
    nu: np.ndarray        # (n,)
    theta: np.ndarray     # (n,)
    B: np.ndarray         # (n, H) complex
    C: np.ndarray         # (H, n) complex
    D: np.ndarray         # (H,)
    ln_gamma: np.ndarray  # (H,)
    ln_beta: np.ndarray   # (H,)

    @property
    def n(self):
        return self.nu.shape[0]

    @property
    def H(self):
        return self.D.shape[0]

    @property
    def lam(self):
        return np.exp(-np.exp(self.nu) + 1j * self.theta)


@dataclass
class LruModel:
    config: ModelConfig
    embed_W: np.ndarray
    embed_b: np.ndarray
    blocks: List[LruBlock]
    head_W: np.ndarray
    head_b: np.ndarray

    @property
    def orders(self):
        return [b.n for b in self.blocks]

    def copy(self):
        return copy.deepcopy(self)

    def params(self):
        """Flat ``name -> real array`` view; complex tensors split into ``.re``/``.im``."""
        out = OrderedDict()
        out["embed.W"] = self.embed_W
        out["embed.b"] = self.embed_b
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            out[p + "nu"] = b.nu
            out[p + "theta"] = b.theta
            out[p + "B.re"] = b.B.real.copy()
            out[p + "B.im"] = b.B.imag.copy()
            out[p + "C.re"] = b.C.real.copy()
            out[p + "C.im"] = b.C.imag.copy()
            out[p + "D"] = b.D
            out[p + "ln.gamma"] = b.ln_gamma
            out[p + "ln.beta"] = b.ln_beta
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def set_params(self, flat):
        self.embed_W = flat["embed.W"]
        self.embed_b = flat["embed.b"]
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            b.nu = flat[p + "nu"]
            b.theta = flat[p + "theta"]
            b.B = flat[p + "B.re"] + 1j * flat[p + "B.im"]
            b.C = flat[p + "C.re"] + 1j * flat[p + "C.im"]
            b.D = flat[p + "D"]
            b.ln_gamma = flat[p + "ln.gamma"]
            b.ln_beta = flat[p + "ln.beta"]
        self.head_W = flat["head.W"]
        self.head_b = flat["head.b"]


def is_recurrent_param(name):
    return name.startswith("blocks.") and name.split(".", 2)[2] in RECURRENT_SUFFIXES


def block_param_names(i):
    return [f"blocks.{i}.{s}" for s in RECURRENT_SUFFIXES + ("ln.gamma", "ln.beta")]


@dataclass
class GradientBundle:
    loss: float
    grads: "OrderedDict[str, np.ndarray]"
    outputs: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# construction


def init_block(rng, H, n, r_min=0.4, r_max=0.99, max_phase=2 * np.pi):
    """LRU ring initialization; the input normalization sqrt(1-|lam|^2) is folded into B."""
    u1 = rng.random(n)
    u2 = rng.random(n)
    nu = np.log(-0.5 * np.log(u1 * (r_max ** 2 - r_min ** 2) + r_min ** 2))
    theta = max_phase * u2
    gamma = np.sqrt(1.0 - np.exp(-2.0 * np.exp(nu)))
    B = (rng.standard_normal((n, H)) + 1j * rng.standard_normal((n, H))) / np.sqrt(2 * H)
    B = B * gamma[:, None]
    C = (rng.standard_normal((H, n)) + 1j * rng.standard_normal((H, n))) / np.sqrt(n)
    return LruBlock(nu, theta, B, C, rng.standard_normal(H), np.ones(H), np.zeros(H))


def init_model(config: ModelConfig, rng=None, seed=0):
    rng = np.random.default_rng(seed) if rng is None else rng
    H = config.H
    embed_W = rng.standard_normal((config.d_in, H)) / np.sqrt(config.d_in)
    blocks = [init_block(rng, H, config.n, config.r_min, config.r_max, config.max_phase)
              for _ in range(config.depth)]
    head_W = rng.standard_normal((H, config.d_out)) / np.sqrt(H)
    return LruModel(config, embed_W, np.zeros(H), blocks, head_W, np.zeros(config.d_out))


# --------------------------------------------------------------------------
# elementwise pieces


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _layernorm(u, gamma, beta):
    mu = u.mean(-1, keepdims=True)
    var = u.var(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (u - mu) * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _layernorm_backward(gz, gamma, cache):
    xhat, rstd = cache
    axes = tuple(range(gz.ndim - 1))
    g_gamma = np.sum(gz * xhat, axis=axes)
    g_beta = np.sum(gz, axis=axes)
    gx = gz * gamma
    gu = rstd * (gx - gx.mean(-1, keepdims=True) - xhat * (gx * xhat).mean(-1, keepdims=True))
    return gu, g_gamma, g_beta


# --------------------------------------------------------------------------
# recurrent block


def _rc(x, M):
    """``x @ M`` for real ``x`` and complex ``M`` as one real product on interleaved pairs."""
    M = np.ascontiguousarray(M, dtype=complex)
    out = x @ M.view(float)
    return out.view(complex)


def _re_cc(s, M):
    """``Re(s @ M)`` for complex ``s`` and ``M`` as one real product."""
    s = np.ascontiguousarray(s)
    W = np.empty((2 * M.shape[0], M.shape[1]))
    W[0::2] = M.real
    W[1::2] = -M.imag
    return s.view(float) @ W


def _lru_apply(block: LruBlock, z, mode="scan"):
    """``z`` is ``(b, L, H)``; returns outputs and the state sequence."""
    lam = block.lam
    Bz = _rc(z, block.B.T)
    s = linear_scan(lam, Bz, mode)
    y = _re_cc(s, block.C.T) + block.D * z
    return y, s


def _lru_backward(block: LruBlock, z, s, gy, mode="scan"):
    lam = block.lam
    H = z.shape[-1]
    n = block.n
    g_D = np.sum(gy * z, axis=(0, 1))
    gy2 = gy.reshape(-1, H)
    g_C = _rc(np.ascontiguousarray(gy2.T), s.reshape(-1, n)).conj()
    gs = _rc(gy, block.C.conj())
    # adjoint recurrence: G[k] = gs[k] + conj(lam) G[k+1]
    G = linear_scan(lam.conj(), gs, mode, reverse=True)
    g_lam = np.sum(s[:, :-1].conj() * G[:, 1:], axis=(0, 1))
    G2 = G.reshape(-1, n)
    g_B = _rc(np.ascontiguousarray(z.reshape(-1, H).T), G2).T
    gz = gy * block.D + _re_cc(G, block.B.conj())
    # lam = exp(w), w = -exp(nu) + i theta
    g_w = lam.conj() * g_lam
    g_nu = g_w.real * (-np.exp(block.nu))
    g_theta = g_w.imag
    return gz, {"nu": g_nu, "theta": g_theta, "B.re": g_B.real, "B.im": g_B.imag,
                "C.re": g_C.real, "C.im": g_C.imag, "D": g_D}


def block_forward(block: LruBlock, u, mode="scan"):
    """Apply the linear recurrent block to one ``(H, L)`` sequence; returns ``(H, L)``."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != block.H:
        raise DimensionError(f"expected input of shape ({block.H}, L), got {u.shape}")
    y, _ = _lru_apply(block, u.T[None], mode)
    return y[0].T


# --------------------------------------------------------------------------
# full model


def _check_input(model, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != model.config.d_in:
        raise DimensionError(f"expected (batch, L, {model.config.d_in}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise DimensionError("input length must be >= 1")
    return x


def forward(model: LruModel, x, train=False, rng=None, mode="scan"):
    """Run the model; returns ``(outputs, cache)`` for :func:`backward_from_cache`."""
    cfg = model.config
    x = _check_input(model, x)
    u = x @ model.embed_W + model.embed_b
    layers = []
    for block in model.blocks:
        if cfg.norm == "layer":
            z, ln_cache = _layernorm(u, block.ln_gamma, block.ln_beta)
        else:
            z, ln_cache = u, None
        v, s = _lru_apply(block, z, mode)
        if cfg.activation == "gelu":
            a, t = _gelu(v)
        else:
            a, t = v, None
        mask = None
        if train and cfg.dropout > 0:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            mask = (rng.random(a.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            a = a * mask
        layers.append((z, ln_cache, v, s, t, mask))
        u = u + a
    if cfg.pooling == "mean":
        pooled = u.mean(axis=1)
    elif cfg.pooling == "last":
        pooled = u[:, -1]
    else:
        pooled = u
    out = pooled @ model.head_W + model.head_b
    return out, (x, layers, pooled, u.shape)


def model_forward(model: LruModel, x, train=False, rng=None, mode="scan"):
    return forward(model, x, train, rng, mode)[0]


def backward_from_cache(model: LruModel, cache, g_out, mode="scan"):
    cfg = model.config
    x, layers, pooled, ushape = cache
    grads = OrderedDict()
    grads["head.W"] = pooled.reshape(-1, pooled.shape[-1]).T @ g_out.reshape(-1, g_out.shape[-1])
    grads["head.b"] = g_out.reshape(-1, g_out.shape[-1]).sum(0)
    g_pooled = g_out @ model.head_W.T
    if cfg.pooling == "mean":
        gu = np.broadcast_to(g_pooled[:, None, :] / ushape[1], ushape).copy()
    elif cfg.pooling == "last":
        gu = np.zeros(ushape)
        gu[:, -1] = g_pooled
    else:
        gu = g_pooled
    block_grads = []
    for block, (z, ln_cache, v, s, t, mask) in zip(reversed(model.blocks), reversed(layers)):
        ga = gu if mask is None else gu * mask
        gv = ga * _gelu_grad(v, t) if t is not None else ga
        gz, g = _lru_backward(block, z, s, gv, mode)
        if ln_cache is not None:
            gin, g["ln.gamma"], g["ln.beta"] = _layernorm_backward(gz, block.ln_gamma, ln_cache)
        else:
            gin = gz
            g["ln.gamma"] = np.zeros_like(block.ln_gamma)
            g["ln.beta"] = np.zeros_like(block.ln_beta)
        gu = gu + gin
        block_grads.append(g)
    block_grads.reverse()
    H = model.config.H
    grads["embed.W"] = x.reshape(-1, x.shape[-1]).T @ gu.reshape(-1, H)
    grads["embed.b"] = gu.reshape(-1, H).sum(0)
    ordered = OrderedDict()
    ordered["embed.W"] = grads["embed.W"]
    ordered["embed.b"] = grads["embed.b"]
    for i, g in enumerate(block_grads):
        for k in RECURRENT_SUFFIXES + ("ln.gamma", "ln.beta"):
            ordered[f"blocks.{i}.{k}"] = g[k]
    ordered["head.W"] = grads["head.W"]
    ordered["head.b"] = grads["head.b"]
    return ordered


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    per = -logp[np.arange(n), labels]
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return per, g / n


def loss_value(outputs, y, loss):
    """Per-sample losses (for diagnostics) and the mean loss."""
    if loss == "cross_entropy":
        per, _ = _softmax_xent(outputs, np.asarray(y, dtype=int))
    elif loss == "mse":
        d = outputs - np.asarray(y, dtype=float).reshape(outputs.shape)
        per = np.mean(d.reshape(d.shape[0], -1) ** 2, axis=1)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return per, float(np.mean(per))


def backward(model: LruModel, x, y, loss="cross_entropy", train=False, rng=None, mode="scan"):
    """Mean batch loss and its gradient with respect to every parameter."""
    outputs, cache = forward(model, x, train, rng, mode)
    if loss == "cross_entropy":
        if outputs.ndim != 2:
            raise DimensionError("cross entropy needs pooled outputs")
        per, g_out = _softmax_xent(outputs, np.asarray(y, dtype=int))
    elif loss == "mse":
        d = outputs - np.asarray(y, dtype=float).reshape(outputs.shape)
        per = np.mean(d.reshape(d.shape[0], -1) ** 2, axis=1)
        g_out = 2.0 * d / d.size
    else:
        raise ValueError(f"unknown loss {loss!r}")
    value = float(np.mean(per))
    if not np.isfinite(value):
        bad = np.flatnonzero(~np.isfinite(per)).tolist()
        raise NumericalError(f"non-finite loss; offending batch indices {bad}")
    grads = backward_from_cache(model, cache, g_out, mode)
    return GradientBundle(value, grads, outputs)


# --------------------------------------------------------------------------
# conversion to and from LTI systems


def extract_system(block: LruBlock):
    """The block's linear recurrence as a :class:`DiagonalSystem` (norm, nonlinearity and residual excluded)."""
    return DiagonalSystem(block.lam, block.B, block.C, np.diag(block.D),
                          real_part_readout=True, post_update_readout=True)


def write_back(block: LruBlock, reduced: DiagonalSystem, optimizer_state=None, block_index=None):
    """New block carrying ``reduced``'s recurrence; ``D`` and the norm are kept.

    When ``optimizer_state`` is given, moments of the resized tensors of
    ``block_index`` are reset to zero.
    """
    a = np.asarray(reduced.a)
    mod = np.abs(a)
    if np.any(mod >= 1.0):
        raise InvariantError("reduced system has |a| >= 1; clamp before writing back")
    if reduced.B.shape[1] != block.H or reduced.C.shape[0] != block.H:
        raise DimensionError("reduced system does not match the block width")
    mod = np.maximum(mod, np.finfo(float).tiny)
    nu = np.log(-np.log(mod))
    theta = np.angle(a)
    new = replace(block, nu=nu, theta=theta, B=np.array(reduced.B, dtype=complex),
                  C=np.array(reduced.C, dtype=complex), D=block.D.copy(),
                  ln_gamma=block.ln_gamma.copy(), ln_beta=block.ln_beta.copy())
    if optimizer_state is not None:
        if block_index is None:
            raise ValueError("block_index is required to reset optimizer moments")
        optimizer_state.reset([f"blocks.{block_index}.{k}" for k in
                               ("nu", "theta", "B.re", "B.im", "C.re", "C.im")])
    return new


def config_dict(config: ModelConfig):
    return asdict(config)
