"""Affine-coupling normalizing flow over latent points, trained by exact
maximum likelihood with hand-written back-propagation.

Conventions: the generative direction maps base noise ``z`` through the
coupling layers in order and then de-standardizes, ``u = mean + scale * y``.
Densities are evaluated through the inverse direction.

Each layer keeps a frozen half ``a = x[frozen]`` and moves the active half::

    y_active = x_active * exp(s(a)) + t(a),   s = s_max * tanh(raw(a))

where ``raw`` and ``t`` are two-hidden-layer tanh perceptrons.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from avrisk.params import LOG_SQRT_2PI

FORMAT = "avrisk-flow"
FORMAT_VERSION = 1


class FlowError(RuntimeError):
    """Non-finite values during training or evaluation."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.05
    val_fraction: float = 0.2
    n_layers: int = 6
    hidden_width: int = 32
    s_max: float = 4.0
    seed: int = 0
    optimizer: str = "sgd"  # or "adam"
    max_grad_norm: float = 10.0
    init_std: float = 1.0
    weight_decay: float = 0.0
    select: str = "best_val"  # or "last"

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.n_layers < 1 or self.hidden_width < 1:
            raise ValueError("epochs, batch_size, n_layers and hidden_width must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.learning_rate <= 0 or self.s_max <= 0:
            raise ValueError("learning_rate and s_max must be positive")
        if self.select not in ("best_val", "last"):
            raise ValueError(f"unknown checkpoint rule {self.select!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# perceptron


def _mlp_init(n_in, width, n_out, rng, init_std):
    """Hidden layers random, output layer zero: the network starts at 0."""
    if rng is None:
        w1, w2 = np.zeros((n_in, width)), np.zeros((width, width))
    else:
        w1 = rng.standard_normal((n_in, width)) * init_std / math.sqrt(max(n_in, 1))
        w2 = rng.standard_normal((width, width)) * init_std / math.sqrt(width)
    return [w1, np.zeros(width), w2, np.zeros(width), np.zeros((width, n_out)), np.zeros(n_out)]


def _mlp_forward(p, a):
    w1, b1, w2, b2, w3, b3 = p
    h1 = np.tanh(a @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    return h2 @ w3 + b3, (a, h1, h2)


def _mlp_backward(p, cache, g_out):
    """Gradients for the parameters and for the input."""
    w1, _, w2, _, w3, _ = p
    a, h1, h2 = cache
    g_w3 = h2.T @ g_out
    g_b3 = g_out.sum(0)
    g_h2 = (g_out @ w3.T) * (1.0 - h2 * h2)
    g_w2 = h1.T @ g_h2
    g_b2 = g_h2.sum(0)
    g_h1 = (g_h2 @ w2.T) * (1.0 - h1 * h1)
    g_w1 = a.T @ g_h1
    g_b1 = g_h1.sum(0)
    return [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3], g_h1 @ w1.T


# ---------------------------------------------------------------------------
# model


@dataclass
class CouplingLayer:
    mask: np.ndarray  # True where the coordinate is transformed
    scale_net: list
    shift_net: list

    @property
    def active(self):
        return np.flatnonzero(self.mask)

    @property
    def frozen(self):
        return np.flatnonzero(~self.mask)

    def params(self) -> list:
        return self.scale_net + self.shift_net


@dataclass
class FlowModel:
    dim: int
    layers: list
    mean: np.ndarray
    scale: np.ndarray
    s_max: float = 4.0
    hidden_width: int = 32
    history: list = field(default_factory=list)

    # -- construction

    @classmethod
    def create(cls, dim, n_layers=6, hidden_width=32, s_max=4.0, rng=None, init_std=1.0):
        """Identity flow; ``rng=None`` zeroes every weight."""
        layers = []
        for k in range(n_layers):
            mask = (np.arange(dim) % 2) == (k % 2)
            n_a, n_f = int(mask.sum()), int((~mask).sum())
            layers.append(CouplingLayer(mask, _mlp_init(n_f, hidden_width, n_a, rng, init_std),
                                        _mlp_init(n_f, hidden_width, n_a, rng, init_std)))
        return cls(dim, layers, np.zeros(dim), np.ones(dim), float(s_max), hidden_width)

    @classmethod
    def identity(cls, dim, n_layers=6, hidden_width=32, s_max=4.0):
        return cls.create(dim, n_layers, hidden_width, s_max, rng=None)

    # -- parameter vector

    def param_arrays(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_flat(self, theta: np.ndarray) -> None:
        k = 0
        for p in self.param_arrays():
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size
        if k != len(theta):
            raise ValueError("parameter vector has the wrong length")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    # -- transforms

    def _scale_shift(self, layer, a):
        raw, c_raw = _mlp_forward(layer.scale_net, a)
        th = np.tanh(raw)
        t, c_t = _mlp_forward(layer.shift_net, a)
        return self.s_max * th, t, (th, c_raw, c_t)

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Base point(s) to latent point(s)."""
        x = np.array(np.atleast_2d(z), dtype=float)
        for layer in self.layers:
            fr, ac = layer.frozen, layer.active
            s, t, _ = self._scale_shift(layer, x[:, fr])
            x[:, ac] = x[:, ac] * np.exp(s) + t
        return self.mean + self.scale * x

    def inverse(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent point(s) to base point(s) and log|det| of the inverse map."""
        y = (np.atleast_2d(np.asarray(u, dtype=float)) - self.mean) / self.scale
        logdet = np.full(y.shape[0], -np.log(self.scale).sum())
        for layer in reversed(self.layers):
            fr, ac = layer.frozen, layer.active
            s, t, _ = self._scale_shift(layer, y[:, fr])
            y[:, ac] = (y[:, ac] - t) * np.exp(-s)
            logdet -= s.sum(axis=1)
        return y, logdet

    def log_prob(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {u.shape[1]}")
        # overflow surfaces as the FlowError below
        with np.errstate(over="ignore", invalid="ignore"):
            z, logdet = self.inverse(u)
            out = -0.5 * np.sum(z * z, axis=1) - self.dim * LOG_SQRT_2PI + logdet
        if not np.all(np.isfinite(out)):
            raise FlowError("non-finite log-density")
        return out

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if m < 1:
            raise ValueError("m must be >= 1")
        return self.forward(rng.standard_normal((m, self.dim)))

    # -- training objective

    def loss_and_grad(self, u: np.ndarray) -> tuple[float, list]:
        """Mean log-density of the batch and its gradient per parameter array."""
        y = (np.asarray(u, dtype=float) - self.mean) / self.scale
        n = y.shape[0]
        caches = []
        total_s = 0.0
        for layer in reversed(self.layers):
            fr, ac = layer.frozen, layer.active
            a = y[:, fr]
            s, t, c = self._scale_shift(layer, a)
            x_a = (y[:, ac] - t) * np.exp(-s)
            caches.append((layer, s, c, x_a))
            total_s += s.sum()
            y = y.copy()
            y[:, ac] = x_a
        z = y
        value = (-0.5 * np.sum(z * z) - total_s) / n - self.dim * LOG_SQRT_2PI - np.log(self.scale).sum()

        g = -z / n
        grads = {}
        for layer, s, (th, c_raw, c_t), x_a in reversed(caches):
            fr, ac = layer.frozen, layer.active
            g_xa = g[:, ac]
            e = np.exp(-s)
            g_ya = g_xa * e
            g_t = -g_ya
            g_s = -g_xa * x_a - 1.0 / n
            g_raw = g_s * self.s_max * (1.0 - th * th)
            p_raw, g_a1 = _mlp_backward(layer.scale_net, c_raw, g_raw)
            p_t, g_a2 = _mlp_backward(layer.shift_net, c_t, g_t)
            g = g.copy()
            g[:, ac] = g_ya
            g[:, fr] += g_a1 + g_a2
            grads[id(layer)] = p_raw + p_t
        return float(value), [gp for layer in self.layers for gp in grads[id(layer)]]

    # -- serialization

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "n_layers": len(self.layers),
            "hidden_width": self.hidden_width,
            "s_max": self.s_max,
            "standardizer": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "layers": [{"mask": layer.mask.astype(int).tolist(),
                        "scale_net": [p.tolist() for p in layer.scale_net],
                        "shift_net": [p.tolist() for p in layer.shift_net]} for layer in self.layers],
            "history": self.history,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FlowModel":
        if doc.get("format") != FORMAT:
            raise ValueError("not a flow model file")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported flow model version {doc.get('version')}")
        dim, width = int(doc["dim"]), int(doc["hidden_width"])
        layers = []
        for ld in doc["layers"]:
            mask = np.asarray(ld["mask"], dtype=bool)
            n_a, n_f = int(mask.sum()), int((~mask).sum())
            nets = []
            for key in ("scale_net", "shift_net"):
                arrs = [np.asarray(p, dtype=float) for p in ld[key]]
                arrs[0] = arrs[0].reshape(n_f, width)
                arrs[4] = arrs[4].reshape(width, n_a)
                nets.append(arrs)
            layers.append(CouplingLayer(mask, *nets))
        std = doc["standardizer"]
        return cls(dim, layers, np.asarray(std["mean"], dtype=float), np.asarray(std["scale"], dtype=float),
                   float(doc["s_max"]), int(doc["hidden_width"]), list(doc.get("history", [])))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def flow_log_prob(m: FlowModel, u) -> np.ndarray:
    return m.log_prob(u)


def flow_sample(m: FlowModel, rng: np.random.Generator, M: int, with_log_prob: bool = False):
    u = m.sample(rng, M)
    return (u, m.log_prob(u)) if with_log_prob else u


# ---------------------------------------------------------------------------
# training

MIN_SAMPLES = 50


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads], norm
    return grads, norm


def fit_flow(samples, cfg: TrainConfig | None = None, groups=None) -> FlowModel:
    """Maximum-likelihood fit; returns the best-validation checkpoint.

    Each epoch records train and validation mean log-density in
    ``model.history``. Validation holds out whole groups so the checkpoint
    is not chosen on copies of training points; by default each distinct
    row is its own group, and ``groups`` may label coarser families such
    as the states of one MCMC chain.
    """
    cfg = cfg or TrainConfig()
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(data)}")
    if not np.all(np.isfinite(data)):
        raise ValueError("training samples must be finite")
    rng = np.random.default_rng(cfg.seed)
    n, dim = data.shape
    if groups is None:
        # identical rows (AMS clones) share a group
        groups = np.unique(data, axis=0, return_inverse=True)[1].ravel()
    groups = np.asarray(groups)
    if groups.shape != (n,):
        raise ValueError("groups must label every sample")
    labels = np.unique(groups)
    if len(labels) < 2:
        raise ValueError("validation split needs at least two distinct samples")
    n_val = min(len(labels) - 1, max(1, int(round(cfg.val_fraction * len(labels)))))
    held = np.isin(groups, rng.permutation(labels)[:n_val])
    val, train = data[held], data[~held]

    model = FlowModel.create(dim, cfg.n_layers, cfg.hidden_width, cfg.s_max, rng, cfg.init_std)
    model.mean = train.mean(axis=0)
    model.scale = np.maximum(train.std(axis=0), 1e-6)

    theta = model.get_flat()
    best_theta, best_val = theta.copy(), float(np.mean(model.log_prob(val)))
    history = [{"epoch": 0, "train": float(np.mean(model.log_prob(train))), "val": best_val,
                "best_val": best_val}]
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate / math.sqrt(epoch)
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            _, grads = model.loss_and_grad(batch)
            grads, _ = _clip(grads, cfg.max_grad_norm)
            g = np.concatenate([x.ravel() for x in grads]) - cfg.weight_decay * theta
            step += 1
            if cfg.optimizer == "adam":
                m1 = 0.9 * m1 + 0.1 * g
                m2 = 0.999 * m2 + 0.001 * g * g
                upd = (m1 / (1 - 0.9 ** step)) / (np.sqrt(m2 / (1 - 0.999 ** step)) + 1e-8)
            else:
                upd = g
            theta = theta + lr * upd  # ascent on log-likelihood
            model.set_flat(theta)
        try:
            tr = float(np.mean(model.log_prob(train)))
            va = float(np.mean(model.log_prob(val)))
        except FlowError:
            tr = va = math.nan
        if not math.isfinite(va):
            raise FlowError(f"validation log-density diverged at epoch {epoch}; "
                            f"last finite best {best_val:.4f}; lower learning_rate")
        if va > best_val:
            best_val, best_theta = va, theta.copy()
        history.append({"epoch": epoch, "train": tr, "val": va, "best_val": best_val})

    model.set_flat(best_theta if cfg.select == "best_val" else theta)
    model.history = history
    return model


def unique_count(samples) -> int:
    return len(np.unique(np.asarray(samples, dtype=float), axis=0))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
