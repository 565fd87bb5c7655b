"""Fully-connected (masked) autoencoder trained with explicit backprop and Adam.

Loss per batch, both terms averaged over coordinates and rows:

    mean((x_rec - x)^2) + lambda_sl * mean(smooth_l1(x - x_rec))

where ``x_rec = Dec(Enc(x * m))`` and the target is always the unmasked x.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FULL_BATCH_LIMIT = 4096


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpSpec:
    input_dim: int
    latent_dim: int
    hidden: Optional[Tuple[int, ...]] = None  # None: (max(2d/3, z+1),)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.latent_dim < self.input_dim):
            raise ValueError(f"latent dim {self.latent_dim} must be in (0, {self.input_dim})")
        if self.hidden is None:
            self.hidden = (max(int(round(2 * self.input_dim / 3)), self.latent_dim + 1),)
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def layer_sizes(self) -> List[int]:
        enc = [self.input_dim, *self.hidden, self.latent_dim]
        return enc + enc[-2::-1]

    @property
    def n_encoder_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass
class MaeTrainConfig:
    epochs: int = 500
    lambda_sl: float = 0.01
    mask_prob: float = 0.75
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    lr: float = 0.001
    lr_decay_gamma: float = 0.95
    plateau_patience: int = 20
    warmup_epochs_before_decay: int = 100
    min_improvement: float = 1e-6
    batch_size: Optional[int] = None  # None: full batch up to 4096 rows, else 256
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.mask_prob < 1):
            raise ValueError("mask_prob must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Autoencoder:
    spec: MlpSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    config: Optional[MaeTrainConfig] = None
    history: List[float] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_dict(self) -> dict:
        return {
            "format": "irscreen.autoencoder",
            "version": FORMAT_VERSION,
            "spec": {"input_dim": self.spec.input_dim, "latent_dim": self.spec.latent_dim,
                     "hidden": list(self.spec.hidden), "seed": self.spec.seed},
            "config": asdict(self.config) if self.config else None,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "history": [float(v) for v in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Autoencoder":
        if d.get("format") != "irscreen.autoencoder" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported serialized autoencoder")
        s = d["spec"]
        spec = MlpSpec(s["input_dim"], s["latent_dim"], tuple(s["hidden"]), s["seed"])
        cfg = MaeTrainConfig(**d["config"]) if d.get("config") else None
        return cls(spec, [np.array(W, dtype=float) for W in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]], cfg,
                   list(d.get("history", [])))


def _relu_layers(spec: MlpSpec) -> List[bool]:
    # ReLU everywhere except the latent layer and the reconstruction layer
    n = len(spec.layer_sizes) - 1
    k = spec.n_encoder_layers
    return [i not in (k - 1, n - 1) for i in range(n)]


def init_autoencoder(spec: MlpSpec, rng: Optional[np.random.Generator] = None) -> Autoencoder:
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Autoencoder(spec, weights, biases)


def mask_sample(x: np.ndarray, p: float, rng: np.random.Generator):
    """Zero each coordinate independently with probability p.

    Returns ``(x * m, m)`` where ``m`` is the 0/1 keep-mask (kept with
    probability 1 - p).
    """
    if not (0 <= p < 1):
        raise ValueError("mask probability must be in [0, 1)")
    x = np.asarray(x, dtype=float)
    if p == 0:
        m = np.ones_like(x)
    else:
        m = (rng.random(x.shape) >= p).astype(float)
    return x * m, m


def smooth_l1(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def _forward(model: Autoencoder, x_in: np.ndarray):
    relu = _relu_layers(model.spec)
    acts = [x_in]
    pre = []
    h = x_in
    for W, b, r in zip(model.weights, model.biases, relu):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if r else z
        acts.append(h)
    return acts, pre


def reconstruction_loss(x: np.ndarray, x_rec: np.ndarray, lambda_sl: float) -> float:
    diff = x_rec - x
    return float(np.mean(diff * diff) + lambda_sl * np.mean(smooth_l1(x, x_rec)))


def forward_loss(model: Autoencoder, x, m=None, lambda_sl: float = 0.01):
    """Reconstruct ``x * m`` and score it against the unmasked x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = np.ones_like(x) if m is None else np.atleast_2d(np.asarray(m, dtype=float))
    acts, _ = _forward(model, x * m)
    x_rec = acts[-1]
    if not np.isfinite(x_rec).all():
        raise TrainingDiverged("non-finite activations in forward pass")
    return x_rec, reconstruction_loss(x, x_rec, lambda_sl)


def backward_gradients(model: Autoencoder, x, m=None, lambda_sl: float = 0.01):
    """Loss and exact gradients, returned as (loss, [dW0, db0, dW1, db1, ...])."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = np.ones_like(x) if m is None else np.atleast_2d(np.asarray(m, dtype=float))
    acts, pre = _forward(model, x * m)
    x_rec = acts[-1]
    loss = reconstruction_loss(x, x_rec, lambda_sl)
    diff = x_rec - x
    count = diff.size
    # d/dx_rec of SL is diff inside the unit band and sign(diff) outside
    sl_grad = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
    delta = (2.0 * diff + lambda_sl * sl_grad) / count
    relu = _relu_layers(model.spec)
    grads: List[np.ndarray] = [None] * (2 * model.n_layers)
    for i in range(model.n_layers - 1, -1, -1):
        if relu[i]:
            delta = delta * (pre[i] > 0)
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = delta @ model.weights[i].T
    return loss, grads


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-12) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class PlateauSchedule:
    """Hold lr until the warm-up epoch, then decay by gamma after each plateau."""

    def __init__(self, config: MaeTrainConfig):
        self.lr = config.lr
        self.gamma = config.lr_decay_gamma
        self.patience = config.plateau_patience
        self.warmup = config.warmup_epochs_before_decay
        self.min_improvement = config.min_improvement
        self.best = np.inf
        self.stale = 0

    def step(self, epoch: int, loss: float) -> float:
        """Record the loss of 1-based ``epoch``; return the lr for the next epoch."""
        improved = loss < self.best - self.min_improvement
        if loss < self.best:
            self.best = loss
        if epoch <= self.warmup:
            return self.lr
        self.stale = 0 if improved else self.stale + 1
        if self.stale >= self.patience:
            self.lr *= self.gamma
            self.stale = 0
        return self.lr


def train_autoencoder(X_train, spec: MlpSpec, config: MaeTrainConfig) -> Autoencoder:
    """Train on the given (already standardized, training-fold) rows.

    ``config.mask_prob == 0`` gives the plain autoencoder.
    """
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected (n, {spec.input_dim}) training matrix, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("training matrix contains non-finite values")
    rng = np.random.default_rng([config.seed, spec.seed])
    model = init_autoencoder(spec, rng)
    model.config = config
    params = model.params()
    state = AdamState.zeros_like(params)
    schedule = PlateauSchedule(config)
    n = X.shape[0]
    batch = config.batch_size or (n if n <= FULL_BATCH_LIMIT else 256)
    lr = config.lr
    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if batch >= n else rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            xb = X[order[start:start + batch]]
            _, m = mask_sample(xb, config.mask_prob, rng)
            loss, grads = backward_gradients(model, xb, m, config.lambda_sl)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; max |W| = "
                    f"{max(float(np.abs(W).max()) for W in model.weights):.3g}, lr = {lr:.3g}")
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
            total += loss * len(xb)
        epoch_loss = total / n
        model.history.append(epoch_loss)
        model.lr_history.append(lr)
        lr = schedule.step(epoch, epoch_loss)
    return model


def encode(model: Autoencoder, X) -> np.ndarray:
    """Latent embeddings; inference never masks."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected {model.spec.input_dim} columns, got {X.shape[1]}")
    h = X
    relu = _relu_layers(model.spec)
    for i in range(model.spec.n_encoder_layers):
        h = h @ model.weights[i] + model.biases[i]
        if relu[i]:
            h = np.maximum(h, 0.0)
    return h


def reconstruct(model: Autoencoder, X) -> np.ndarray:
    return forward_loss(model, X, None, 0.0)[0]
