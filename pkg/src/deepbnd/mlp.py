"""A small NumPy multilayer perceptron for predicting reduced-basis coefficients.

Hidden layers use Swish, the output layer is linear. The network works in
min-max scaled coefficient space; the loss weights each output by the square
of its range so that, after unscaling, it is the plain squared coefficient
error.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .micro import rng as make_rng


def sigmoid(z):
    # split by sign to avoid overflow in exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def swish(z):
    return z * sigmoid(z)


def swish_grad(z):
    s = sigmoid(z)
    return s + z * s * (1.0 - s)


@dataclass(eq=False)
class MlpModel:
    """Weights ``W`` have shape (n_out, n_in); biases shape (n_out,)."""
    weights: list
    biases: list
    activation: str = "swish"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match {W.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input size does not chain")

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in
                               zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, dims, theta) -> "MlpModel":
        theta = np.asarray(theta, dtype=np.float64)
        need = sum(dims[k + 1] * dims[k] + dims[k + 1] for k in range(len(dims) - 1))
        if theta.size != need:
            raise ValueError(f"expected {need} parameters for dims {list(dims)}, got {theta.size}")
        Ws, bs, i = [], [], 0
        for k in range(len(dims) - 1):
            n_in, n_out = dims[k], dims[k + 1]
            Ws.append(theta[i:i + n_in * n_out].reshape(n_out, n_in).copy())
            i += n_in * n_out
            bs.append(theta[i:i + n_out].copy())
            i += n_out
        return cls(Ws, bs)

    @classmethod
    def init(cls, dims, seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        g = make_rng(seed)
        Ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (n_in + n_out))
            Ws.append(g.uniform(-a, a, size=(n_out, n_in)))
            bs.append(np.zeros(n_out))
        return cls(Ws, bs)

    @classmethod
    def zeros(cls, dims) -> "MlpModel":
        return cls([np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                   [np.zeros(o) for o in dims[1:]])


def forward(model: MlpModel, x) -> np.ndarray:
    """Prediction-mode pass (no dropout). ``x`` is one input or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.layer_dims[0]:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.layer_dims[0]}")
    a = x
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        a = z if k == last else swish(z)
    return a


# --------------------------------------------------------------------------
# scaling and loss


@dataclass(frozen=True, eq=False)
class Scaling:
    """Per-output min-max scaling fitted on training targets."""
    beta_min: np.ndarray
    beta_max: np.ndarray

    @classmethod
    def fit(cls, beta) -> "Scaling":
        beta = np.atleast_2d(beta)
        return cls(beta.min(axis=0), beta.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        """Divisor used for scaling; 1 where the range is degenerate."""
        d = self.beta_max - self.beta_min
        return np.where(d > 0, d, 1.0)

    @property
    def omega(self) -> np.ndarray:
        return self.span ** 2

    def scale(self, beta):
        return (np.asarray(beta) - self.beta_min) / self.span

    def unscale(self, beta_bar):
        return np.asarray(beta_bar) * self.span + self.beta_min

    def to_dict(self) -> dict:
        return {"beta_min": self.beta_min.tolist(), "beta_max": self.beta_max.tolist(),
                "omega": self.omega.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaling":
        return cls(np.asarray(d["beta_min"], dtype=np.float64),
                   np.asarray(d["beta_max"], dtype=np.float64))


def loss(beta_hat, beta, scaling: Scaling) -> float:
    """Range-weighted mean squared scaled error, averaged over outputs (and rows)."""
    d = scaling.scale(beta_hat) - scaling.scale(beta)
    per = np.atleast_2d(scaling.omega * d ** 2).mean(axis=-1)
    return float(per.mean())


def predict(model: MlpModel, scaling: Scaling, x) -> np.ndarray:
    return scaling.unscale(forward(model, x))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 32
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    lr_end_epoch: int | None = None    # defaults to the last epoch
    retention: float = 0.995
    l2: float = 1e-8
    seed: int = 1
    hidden: list = field(default_factory=lambda: [64, 64])
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    patience: int = 0                  # epochs without improvement before stopping; 0 = off

    def __post_init__(self):
        if not 0.0 < self.retention <= 1.0:
            raise ValueError("retention must lie in (0, 1]")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``, decreasing linearly then flat."""
        end = self.lr_end_epoch or self.epochs
        t = min(epoch / max(end - 1, 1), 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * t

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, last_finite):
        super().__init__(f"loss became non-finite in epoch {epoch}; last finite epoch {last_finite}")
        self.epoch = epoch
        self.last_finite = last_finite


def _forward_train(model, x, masks):
    """Forward pass keeping pre-activations; ``masks`` scale hidden activations."""
    zs, acts = [], [x]
    a = x
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        zs.append(z)
        if k == last:
            a = z
        else:
            a = swish(z)
            if masks is not None:
                a = a * masks[k]
        acts.append(a)
    return zs, acts


def objective_and_grad(model: MlpModel, x, target_bar, omega, l2=0.0, masks=None):
    """Batch objective ``mean_i (1/n) sum_j omega_j (out_ij - t_ij)^2 + l2 ||theta||^2``.

    Returns ``(value, grads_W, grads_b)``.
    """
    x = np.atleast_2d(x)
    zs, acts = _forward_train(model, x, masks)
    out = acts[-1]
    n, m = out.shape
    diff = out - target_bar
    value = float(np.sum(omega * diff ** 2) / (n * m))
    delta = 2.0 * omega * diff / (n * m)
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            da = delta @ model.weights[k]
            if masks is not None:
                da = da * masks[k - 1]
            delta = da * swish_grad(zs[k - 1])
    if l2:
        value += l2 * float(sum(np.sum(W ** 2) + np.sum(b ** 2)
                                for W, b in zip(model.weights, model.biases)))
        gW = [g + 2.0 * l2 * W for g, W in zip(gW, model.weights)]
        gb = [g + 2.0 * l2 * b for g, b in zip(gb, model.biases)]
    return value, gW, gb


def evaluate(model: MlpModel, scaling: Scaling, x, beta, l2=0.0, retention=1.0, rng=None) -> float:
    """Loss on unscaled targets. With ``retention < 1`` a dropout mask is drawn."""
    masks = None
    if retention < 1.0:
        masks = _draw_masks(model, np.atleast_2d(x).shape[0], retention, rng)
    v, _, _ = objective_and_grad(model, x, scaling.scale(beta), scaling.omega, l2, masks)
    return v


def _draw_masks(model, n, retention, g):
    return [(g.random((n, W.shape[0])) < retention) / retention for W in model.weights[:-1]]


def grad_check(model: MlpModel, x, beta, scaling: Scaling, l2=0.0, h=1e-5) -> float:
    """Max relative difference between backprop and central differences."""
    target = scaling.scale(beta)
    _, gW, gb = objective_and_grad(model, x, target, scaling.omega, l2)
    analytic = np.concatenate([np.concatenate([a.ravel(), b]) for a, b in zip(gW, gb)])
    theta = model.flat()
    dims = model.layer_dims
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = objective_and_grad(MlpModel.from_flat(dims, tp), x, target, scaling.omega, l2)[0]
        fm = objective_and_grad(MlpModel.from_flat(dims, tm), x, target, scaling.omega, l2)[0]
        numeric[i] = (fp - fm) / (2 * h)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = np.maximum(scale, 1e-8 * max(np.abs(analytic).max(), 1e-300))
    return float(np.max(np.abs(analytic - numeric) / scale))


@dataclass
class History:
    loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self):
        return asdict(self)


def train(x, beta, x_val, beta_val, cfg: TrainConfig, scaling: Scaling | None = None):
    """Fit an MLP mapping ``x`` to coefficients ``beta`` with ADAM.

    Returns ``(model, scaling, history)``; the model is the snapshot with the
    lowest validation loss.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
    x_val = np.atleast_2d(np.asarray(x_val, dtype=np.float64))
    beta_val = np.atleast_2d(np.asarray(beta_val, dtype=np.float64))
    if x.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("training and validation sets must be nonempty")
    if x.shape[0] != beta.shape[0] or x_val.shape[0] != beta_val.shape[0]:
        raise ValueError("inputs and targets have different row counts")
    if scaling is None:
        scaling = Scaling.fit(beta)
    g = make_rng(cfg.seed)
    dims = [x.shape[1], *cfg.hidden, beta.shape[1]]
    model = MlpModel.init(dims, seed=int(g.integers(2 ** 31)))
    t_bar = scaling.scale(beta)
    omega = scaling.omega
    mW = [np.zeros_like(W) for W in model.weights]
    vW = [np.zeros_like(W) for W in model.weights]
    mb = [np.zeros_like(b) for b in model.biases]
    vb = [np.zeros_like(b) for b in model.biases]
    hist = History()
    best, best_val, step, since = model.copy(), np.inf, 0, 0
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        perm = g.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            masks = _draw_masks(model, idx.size, cfg.retention, g) if cfg.retention < 1 else None
            val, gW, gb = objective_and_grad(model, x[idx], t_bar[idx], omega, cfg.l2, masks)
            total += val * idx.size
            step += 1
            c1, c2 = 1 - b1 ** step, 1 - b2 ** step
            for p, gp, m, v in zip(model.weights + model.biases, gW + gb, mW + mb, vW + vb):
                m *= b1
                m += (1 - b1) * gp
                v *= b2
                v += (1 - b2) * gp * gp
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        train_loss = total / n
        val_loss = evaluate(model, scaling, x_val, beta_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(epoch, epoch - 1)
        hist.loss.append(train_loss)
        hist.val_loss.append(val_loss)
        hist.lr.append(lr)
        if val_loss < best_val:
            best_val, best, hist.best_epoch, since = val_loss, model.copy(), epoch, 0
        else:
            since += 1
            if cfg.patience and since >= cfg.patience:
                break
    return best, scaling, hist


# --------------------------------------------------------------------------
# persistence


def model_manifest(model: MlpModel, scaling: Scaling, cfg: TrainConfig | None,
                   basis_hash: str = "") -> dict:
    return {"layer_dims": model.layer_dims, "activation": model.activation,
            "scaling": scaling.to_dict(),
            "train_config": cfg.to_dict() if cfg is not None else None,
            "basis_hash": basis_hash}


def save_model(directory, model, scaling, cfg=None, basis_hash="", history=None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(model.flat(), dtype="<f8").tofile(d / "weights.bin")
    man = model_manifest(model, scaling, cfg, basis_hash)
    (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    if history is not None:
        (d / "history.json").write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True))


def load_model(directory):
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    theta = np.fromfile(d / "weights.bin", dtype="<f8")
    model = MlpModel.from_flat(man["layer_dims"], theta)
    return model, Scaling.from_dict(man["scaling"]), man
