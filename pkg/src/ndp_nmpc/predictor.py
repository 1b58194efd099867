"""ReLU MLP disturbance predictor with spectral normalisation, trained with Adam.

Inputs are ``[rel_p, rel_v]`` (neighbour minus ego, inertial frame) and the
output is the inertial disturbance force in newtons. Inputs are standardised
with statistics from the training split; the spectral constraint, and hence
the Lipschitz bound, applies to the network acting on standardised inputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WIDTHS = (6, 128, 64, 128, 3)
SN_MODES = ("exact", "clip")
FORMAT_MAGIC = "NDP-MLP"
FORMAT_MAJOR = 1


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class MlpModel:
    widths: tuple
    W: list
    b: list
    gamma: float = math.inf
    sn_mode: str = "clip"
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    norm_scale: np.ndarray = field(default_factory=lambda: np.ones(6))

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.sn_mode not in SN_MODES:
            raise ValueError(f"sn_mode must be one of {SN_MODES}")
        if len(self.W) != len(self.widths) - 1 or len(self.b) != len(self.W):
            raise ValueError("layer count does not match widths")
        for l, (Wl, bl) in enumerate(zip(self.W, self.b)):
            if Wl.shape != (self.widths[l + 1], self.widths[l]) or bl.shape != (self.widths[l + 1],):
                raise ValueError(f"layer {l} shape does not match widths")
        if len(self.norm_mean) != self.widths[0] or len(self.norm_scale) != self.widths[0]:
            raise ValueError("input normalisation has the wrong length")

    @property
    def n_hidden(self) -> int:
        return len(self.W) - 1


@dataclass
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 1e-4
    batch_size: int = 1024
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sn_per_step: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_model(widths=DEFAULT_WIDTHS, seed=0, gamma=math.inf, sn_mode="clip") -> MlpModel:
    """Gaussian initialisation with std 1/sqrt(fan_in) and zero biases."""
    rng = np.random.default_rng(seed)
    W = [rng.normal(0.0, 1.0 / math.sqrt(widths[l]), size=(widths[l + 1], widths[l]))
         for l in range(len(widths) - 1)]
    b = [np.zeros(widths[l + 1]) for l in range(len(widths) - 1)]
    return MlpModel(tuple(widths), W, b, gamma, sn_mode,
                    np.zeros(widths[0]), np.ones(widths[0]))


# ---------------------------------------------------------------------------
# evaluation

def _standardize(model, x):
    return (np.asarray(x, dtype=float) - model.norm_mean) / model.norm_scale


def _forward_std(W, b, z):
    h = z
    for l in range(len(W) - 1):
        h = np.maximum(h @ W[l].T + b[l], 0.0)
    return h @ W[-1].T + b[-1]


def forward(model: MlpModel, x):
    """Network output for one input vector or a batch of rows."""
    return _forward_std(model.W, model.b, _standardize(model, x))


def predict_horizon(model: MlpModel, rel_p, rel_v):
    """Disturbance predictions for a stack of relative states in one batch."""
    x = np.concatenate([np.atleast_2d(rel_p), np.atleast_2d(rel_v)], axis=-1)
    return forward(model, x)


def loss_and_grads(model: MlpModel, X, Y):
    """Mean-squared error and its gradients w.r.t. every weight and bias."""
    z = _standardize(model, X)
    return _loss_and_grads(model.W, model.b, z, np.asarray(Y, dtype=float))


def _loss_and_grads(W, b, z, Y):
    acts = [z]
    h = z
    for l in range(len(W) - 1):
        h = np.maximum(h @ W[l].T + b[l], 0.0)
        acts.append(h)
    out = h @ W[-1].T + b[-1]
    err = out - Y
    loss = float(np.mean(err * err))
    delta = (2.0 / err.size) * err
    gW = [None] * len(W)
    gb = [None] * len(W)
    for l in range(len(W) - 1, -1, -1):
        gW[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W[l]) * (acts[l] > 0)
    return loss, gW, gb


def evaluate_mse(model: MlpModel, X, Y) -> float:
    err = forward(model, X) - np.asarray(Y, dtype=float)
    return float(np.mean(err * err))


# ---------------------------------------------------------------------------
# spectral normalisation

def _start_vector(n):
    v = np.random.default_rng(12345).standard_normal(n)
    return v / np.linalg.norm(v)


def spectral_norm(W, iters=30, tol=1e-8, squarings=5, v0=None):
    """Largest singular value of ``W`` by power iteration.

    The iteration runs on the Gram matrix raised to the power ``2**squarings``
    (rescaled after each squaring), so each step contracts the error like
    ``2**squarings`` plain power steps. The estimate is ``||W v||`` for the
    converged right singular vector ``v``. Stops early when the relative
    change of the estimate falls below ``tol``.
    """
    W = np.asarray(W, dtype=float)
    if not np.any(W):
        return 0.0
    tall = W.shape[0] >= W.shape[1]
    G = W.T @ W if tall else W @ W.T
    for _ in range(squarings):
        G = G / np.linalg.norm(G)
        G = G @ G
    v = _start_vector(G.shape[0]) if v0 is None else np.asarray(v0, dtype=float)
    sigma = 0.0
    for _ in range(max(int(iters), 1)):
        v = G @ v
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v /= nv
        s = np.linalg.norm(W @ v) if tall else np.linalg.norm(W.T @ v)
        done = abs(s - sigma) <= tol * s
        sigma = s
        if done:
            break
    return float(sigma)


def _normalize_layers(W, gamma, mode):
    if not math.isfinite(gamma):
        return
    for l, Wl in enumerate(W):
        sigma = spectral_norm(Wl)
        if sigma == 0.0:
            continue
        factor = gamma / sigma
        if mode == "clip":
            factor = min(1.0, factor)
        if factor != 1.0:
            Wl = Wl * factor
            # weights of idle units shrink every rescale; once their products underflow to
            # subnormals the matmuls crawl, and at eps**2 of the largest entry they carry nothing
            Wl[np.abs(Wl) < np.finfo(Wl.dtype).eps ** 2 * np.abs(Wl).max()] = 0.0
            W[l] = Wl


def apply_spectral_normalization(model: MlpModel, gamma=None, mode=None) -> MlpModel:
    """Copy of ``model`` with each weight matrix rescaled by ``gamma / sigma``.

    ``exact`` rescales unconditionally; ``clip`` only shrinks layers whose
    spectral norm exceeds ``gamma``.
    """
    gamma = model.gamma if gamma is None else float(gamma)
    mode = model.sn_mode if mode is None else mode
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if mode not in SN_MODES:
        raise ValueError(f"mode must be one of {SN_MODES}")
    out = copy.deepcopy(model)
    out.gamma, out.sn_mode = gamma, mode
    _normalize_layers(out.W, gamma, mode)
    return out


def layer_spectral_norms(model: MlpModel):
    """Per-layer largest singular values from a full SVD."""
    return [float(np.linalg.norm(Wl, 2)) for Wl in model.W]


def lipschitz_upper_bound(model: MlpModel, raw_inputs=False) -> float:
    """Product of per-layer spectral norms.

    By default this bounds the network on standardised inputs. With
    ``raw_inputs`` it also accounts for the input standardisation.
    """
    bound = float(np.prod(layer_spectral_norms(model)))
    if raw_inputs:
        bound *= float(np.max(1.0 / model.norm_scale))
    return bound


def empirical_lipschitz(model: MlpModel, n_pairs=100_000, seed=0, spread=3.0, raw_inputs=False):
    """Largest observed ``||f(x) - f(x')|| / ||x - x'||`` over random input pairs.

    Pairs are drawn in standardised coordinates (or raw ones with ``raw_inputs``),
    half of them as close neighbours so that local slopes are probed too.
    """
    rng = np.random.default_rng(seed)
    d = model.widths[0]
    za = rng.normal(0.0, spread, size=(n_pairs, d))
    zb = rng.normal(0.0, spread, size=(n_pairs, d))
    half = n_pairs // 2
    zb[:half] = za[:half] + rng.normal(0.0, 0.05, size=(half, d))
    if raw_inputs:
        xa = model.norm_mean + za * model.norm_scale
        xb = model.norm_mean + zb * model.norm_scale
        num = np.linalg.norm(forward(model, xa) - forward(model, xb), axis=1)
        den = np.linalg.norm(xa - xb, axis=1)
    else:
        num = np.linalg.norm(_forward_std(model.W, model.b, za) - _forward_std(model.W, model.b, zb), axis=1)
        den = np.linalg.norm(za - zb, axis=1)
    return float(np.max(num / den))


# ---------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # moments of idle units decay geometrically into subnormals, which are very slow
            tiny = np.finfo(m.dtype).tiny
            m[np.abs(m) < tiny] = 0.0
            v[v < tiny] = 0.0
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_input_norm(X):
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def train(model: MlpModel, X, Y, cfg: TrainConfig = TrainConfig(), log_every=0, logger=None):
    """Adam on the mean-squared error with spectral normalisation each epoch.

    Returns ``(trained_model, history)``; ``history`` holds the mean training
    loss of every epoch. The input model is left untouched.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError("training set must be non-empty with matching X and Y")
    out = copy.deepcopy(model)
    out.norm_mean, out.norm_scale = fit_input_norm(X)
    dt = np.dtype(cfg.dtype)
    Z = ((X - out.norm_mean) / out.norm_scale).astype(dt)
    Yd = Y.astype(dt)
    W = [w.astype(dt) for w in out.W]
    b = [v.astype(dt) for v in out.b]
    _normalize_layers(W, out.gamma, out.sn_mode)
    params = W + b
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n = len(Z)
    bs = min(cfg.batch_size, n)
    nl = len(W)
    history = []
    # divergence is caught through the epoch loss, so the overflow warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                loss, gW, gb = _loss_and_grads(W, b, Z[idx], Yd[idx])
                total += loss * len(idx)
                opt.step(params, gW + gb)
                if cfg.sn_per_step:
                    _normalize_layers(W, out.gamma, out.sn_mode)
                    params[:nl] = W
            epoch_loss = total / n
            if not math.isfinite(epoch_loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            if not cfg.sn_per_step:
                _normalize_layers(W, out.gamma, out.sn_mode)
                params[:nl] = W
            history.append(epoch_loss)
            if logger is not None and log_every and (epoch + 1) % log_every == 0:
                logger.info("epoch %d loss %.6g", epoch + 1, epoch_loss)
    out.W = [w.astype(float) for w in W]
    out.b = [v.astype(float) for v in b]
    # cast back to float64 can nudge sigma by ~1e-7 relative; restore the invariant
    _normalize_layers(out.W, out.gamma, out.sn_mode)
    return out, history


# ---------------------------------------------------------------------------
# prediction maps

def grid_map(model: MlpModel, height, rel_v=(0.0, 0.0, 0.0), extent=1.0, resolution=21):
    """Predicted z-force on a square grid of lateral offsets at a fixed relative height.

    ``height`` is the neighbour's height above the ego vehicle. Returns
    ``(xs, ys, grid)`` with ``grid[i, j]`` at ``(xs[j], ys[i])``.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xs = np.linspace(-extent / 2, extent / 2, resolution)
    ys = xs.copy()
    gx, gy = np.meshgrid(xs, ys)
    rel_p = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(height))], axis=1)
    rel_vv = np.broadcast_to(np.asarray(rel_v, dtype=float), rel_p.shape)
    fz = predict_horizon(model, rel_p, rel_vv)[:, 2]
    return xs, ys, fz.reshape(gx.shape)


def write_grid_csv(path, xs, ys, grid):
    with open(path, "w") as fh:
        fh.write("y\\x," + ",".join(f"{x:.9g}" for x in xs) + "\n")
        for yv, row in zip(ys, grid):
            fh.write(f"{yv:.9g}," + ",".join(f"{v:.9g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# model file

def _fmt(x):
    return format(float(x), ".17g")


def save_model(model: MlpModel, path):
    lines = [f"{FORMAT_MAGIC} {FORMAT_MAJOR}",
             f"gamma {_fmt(model.gamma)}",
             f"sn_mode {model.sn_mode}",
             "widths " + " ".join(str(w) for w in model.widths),
             "norm " + " ".join(_fmt(v) for v in np.concatenate([model.norm_mean, model.norm_scale]))]
    for Wl, bl in zip(model.W, model.b):
        lines.append(f"W {Wl.shape[0]} {Wl.shape[1]}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in Wl)
        lines.append(f"b {len(bl)}")
        lines.append(" ".join(_fmt(v) for v in bl))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except UnicodeDecodeError as exc:
        raise ModelFormatError("model file is not text") from exc
    if not lines:
        raise ModelFormatError("empty model file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_MAGIC:
        raise ModelFormatError("bad magic line")
    try:
        major = int(head[1].split(".")[0])
    except ValueError as exc:
        raise ModelFormatError("bad version") from exc
    if major != FORMAT_MAJOR:
        raise ModelFormatError(f"unsupported model format version {head[1]}")

    header = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("W "):
        key, _, rest = lines[i].partition(" ")
        header[key] = rest
        i += 1
    try:
        gamma = float(header["gamma"])
        sn_mode = header["sn_mode"]
        widths = tuple(int(w) for w in header["widths"].split())
        norm = np.array([float(v) for v in header["norm"].split()])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"missing or malformed header field: {exc}") from exc
    if len(norm) != 2 * widths[0]:
        raise ModelFormatError("norm entry has the wrong length")

    W, b = [], []
    try:
        for l in range(len(widths) - 1):
            tag, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            if tag != "W" or (rows, cols) != (widths[l + 1], widths[l]):
                raise ModelFormatError(f"layer {l} weight header inconsistent with widths")
            mat = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)])
            if mat.shape != (rows, cols):
                raise ModelFormatError(f"layer {l} weight data truncated")
            i += 1 + rows
            tag, length = lines[i].split()
            if tag != "b" or int(length) != rows:
                raise ModelFormatError(f"layer {l} bias header inconsistent")
            vec = np.array([float(v) for v in lines[i + 1].split()])
            if vec.shape != (rows,):
                raise ModelFormatError(f"layer {l} bias data truncated")
            i += 2
            W.append(mat)
            b.append(vec)
    except IndexError as exc:
        raise ModelFormatError("model file truncated") from exc
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed number: {exc}") from exc
    try:
        return MlpModel(widths, W, b, gamma, sn_mode, norm[:widths[0]], norm[widths[0]:])
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
