"""Fully connected autoencoder trained with Adam, written directly in numpy.

The encoder maps R^P -> R^Q through ReLU hidden layers and a linear latent
layer; the decoder mirrors it.  Two reconstruction modes are supported:

* ``squared_euclidean``: linear output, loss = mean_i ||x_hat_i - x_i||^2
* ``hamming_surrogate``: sigmoid output trained with elementwise binary
  cross-entropy; the reported metric is the mean Hamming distance after
  thresholding at 0.5 (for thermometer-encoded binary inputs).

Both add ``weight_decay * sum(||param||^2)`` over every weight and bias.
"""

from __future__ import annotations

import dataclasses
import io
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LOSS_MODES = ("squared_euclidean", "hamming_surrogate")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class MlpConfig:
    input_dim: int
    latent_dim: int = 50
    hidden_dims: list[int] = field(default_factory=lambda: [1000])
    learning_rate: float = 0.001
    dropout_prob: float = 0.001
    weight_decay: float = 0.001
    epochs: int = 100
    batch_size: int = 2000
    seed: int = 0
    loss_mode: str = "squared_euclidean"

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not 1 <= self.latent_dim < self.input_dim:
            raise ValueError(
                f"latent_dim ({self.latent_dim}) must be in [1, input_dim={self.input_dim})"
            )
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden layer sizes must be positive")
        if not 0.0 <= self.learning_rate:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    @property
    def layer_sizes(self) -> list[int]:
        """Widths from input to output, e.g. [P, 1000, Q, 1000, P]."""
        enc = [self.input_dim, *self.hidden_dims, self.latent_dim]
        return enc + enc[-2::-1]

    def replace(self, **changes) -> "MlpConfig":
        return dataclasses.replace(self, **changes)


def parse_config(text: str, **overrides) -> MlpConfig:
    """Parse line-oriented ``key = value`` text into an MlpConfig.

    Blank lines and ``#`` comments are ignored.  ``hidden_dims`` is a comma
    separated list (empty for a direct linear autoencoder).
    """
    fields = {f.name: f for f in dataclasses.fields(MlpConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key == "hidden_dims":
            values[key] = [int(v) for v in value.split(",") if v.strip()]
        elif key == "loss_mode":
            values[key] = value
        elif key in ("learning_rate", "dropout_prob", "weight_decay"):
            values[key] = float(value)
        else:
            values[key] = int(value)
    values.update(overrides)
    if "input_dim" not in values:
        raise ValueError("input_dim missing")
    return MlpConfig(**values)


def format_config(cfg: MlpConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "hidden_dims":
            v = ",".join(str(h) for h in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class MlpModel:
    """Weights and biases for every layer, encoder first.

    ``weights[k]`` has shape (in, out) so a layer computes ``h @ W + b``.
    The first ``n_encoder`` layers form the encoder.
    """

    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    activation = "relu"

    @property
    def n_encoder(self) -> int:
        return len(self.config.hidden_dims) + 1

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def param_sq_norm(self) -> float:
        return float(sum(np.sum(p * p) for p in self.params))

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.config,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_model(config: MlpConfig, seed: int | None = None) -> MlpModel:
    """He-scaled normal weights (fan-in) before ReLU layers, 1/fan-in otherwise."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    sizes = config.layer_sizes
    n_layers = len(sizes) - 1
    relu_after = _relu_layers(config)
    weights, biases = [], []
    for k in range(n_layers):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        gain = 2.0 if k in relu_after else 1.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(config, weights, biases)


def _relu_layers(config: MlpConfig) -> set[int]:
    # layer indices whose output passes through ReLU (every hidden layer)
    n_hidden = len(config.hidden_dims)
    n_layers = 2 * (n_hidden + 1)
    return {k for k in range(n_layers) if k != n_hidden and k != n_layers - 1}


def _check_input(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.config.input_dim:
        raise ValueError(
            f"input width {X.shape[1]} does not match model input_dim {model.config.input_dim}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return X


def _forward(model: MlpModel, X: np.ndarray, rng: np.random.Generator | None = None):
    """Return (activations, masks, pre_output).

    ``activations[k]`` is the input to layer k; masks hold the (scaled)
    dropout multipliers applied after each ReLU, or None.  ``pre_output`` is
    the final linear output before any sigmoid.
    """
    cfg = model.config
    relu_after = _relu_layers(cfg)
    p = cfg.dropout_prob
    acts = [X]
    masks: list[np.ndarray | None] = []
    h = X
    n_layers = len(model.weights)
    for k in range(n_layers):
        a = h @ model.weights[k] + model.biases[k]
        mask = None
        if k in relu_after:
            a = np.maximum(a, 0.0)
            if rng is not None and p > 0:
                mask = (rng.random(a.shape) >= p) / (1.0 - p)
                a = a * mask
        masks.append(mask)
        if k < n_layers - 1:
            acts.append(a)
        h = a
    return acts, masks, h


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _output(model: MlpModel, pre: np.ndarray) -> np.ndarray:
    if model.config.loss_mode == "hamming_surrogate":
        return _sigmoid(pre)
    return pre


def reconstruct(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode pass; returns (z, x_hat), squeezed for a single row."""
    X = _check_input(model, x)
    acts, _, pre = _forward(model, X)
    z = acts[model.n_encoder]
    x_hat = _output(model, pre)
    if np.ndim(x) == 1:
        return z[0], x_hat[0]
    return z, x_hat


def embed(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Latent codes for every row of X (inference mode)."""
    X = _check_input(model, X)
    h = X
    relu_after = _relu_layers(model.config)
    for k in range(model.n_encoder):
        h = h @ model.weights[k] + model.biases[k]
        if k in relu_after:
            h = np.maximum(h, 0.0)
    return h


def _bce_from_logits(pre: np.ndarray, X: np.ndarray) -> np.ndarray:
    # log(1+exp(s)) - x*s, computed stably
    return np.logaddexp(0.0, pre) - X * pre


def _reconstruction_term(model: MlpModel, pre: np.ndarray, X: np.ndarray) -> float:
    if model.config.loss_mode == "hamming_surrogate":
        return float(np.mean(_bce_from_logits(pre, X)))
    diff = pre - X
    return float(np.mean(np.sum(diff * diff, axis=1)))


def reconstruction_loss(model: MlpModel, X: np.ndarray) -> float:
    """Mean reconstruction term on X in inference mode, regularizer excluded."""
    X = _check_input(model, X)
    _, _, pre = _forward(model, X)
    return _reconstruction_term(model, pre, X)


def loss(model: MlpModel, batch: np.ndarray, weight_decay: float | None = None) -> float:
    """Objective value on a batch: reconstruction term + weight_decay * ||params||^2."""
    lam = model.config.weight_decay if weight_decay is None else weight_decay
    if lam < 0:
        raise ValueError("weight_decay must be >= 0")
    X = _check_input(model, batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return reconstruction_loss(model, X) + lam * model.param_sq_norm()


def hamming_distance(model: MlpModel, X: np.ndarray) -> float:
    """Mean per-row Hamming distance between X and the thresholded reconstruction."""
    X = _check_input(model, X)
    _, x_hat = reconstruct(model, X)
    bits = (x_hat >= 0.5).astype(float)
    return float(np.mean(np.sum(bits != (X >= 0.5), axis=1)))


def gradients(
    model: MlpModel,
    batch: np.ndarray,
    weight_decay: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and its gradients w.r.t. (weights, biases) by backpropagation.

    With ``rng`` set, dropout masks are sampled (training mode).
    """
    lam = model.config.weight_decay if weight_decay is None else weight_decay
    X = _check_input(model, batch)
    n = X.shape[0]
    acts, masks, pre = _forward(model, X, rng)
    relu_after = _relu_layers(model.config)

    if model.config.loss_mode == "hamming_surrogate":
        value = float(np.mean(_bce_from_logits(pre, X)))
        delta = (_sigmoid(pre) - X) / X.size
    else:
        diff = pre - X
        value = float(np.sum(diff * diff) / n)
        delta = 2.0 * diff / n
    value += lam * model.param_sq_norm()

    n_layers = len(model.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta + 2.0 * lam * model.weights[k]
        gb[k] = delta.sum(axis=0) + 2.0 * lam * model.biases[k]
        if k == 0:
            break
        delta = delta @ model.weights[k].T
        # acts[k] is the post-activation output of layer k-1
        if k - 1 in relu_after:
            if masks[k - 1] is not None:
                delta = delta * masks[k - 1]
            delta = delta * (acts[k] > 0)
    return value, gw, gb


@dataclass
class TrainReport:
    initial_loss: float
    initial_val_loss: float
    train_loss: list[float]
    val_loss: list[float]
    wall_time: float
    param_norms: list[float]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,train_loss,val_loss\n")
        out.write(f"0,{self.initial_loss!r},{self.initial_val_loss!r}\n")
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), 1):
            out.write(f"{i},{t!r},{v!r}\n")
        return out.getvalue()


def train(
    X: np.ndarray,
    config: MlpConfig,
    X_val: np.ndarray | None = None,
    model: MlpModel | None = None,
) -> tuple[MlpModel, TrainReport]:
    """Adam over shuffled mini-batches with dropout on hidden activations.

    ``train_loss[e]`` is the full objective on X after epoch e+1, evaluated
    in inference mode, and ``initial_loss`` the same before any update.
    ``val_loss`` is the reconstruction term (no regularizer) on ``X_val``,
    or on X when no validation set is given; ``initial_val_loss`` is that
    term before any update.
    """
    X = np.asarray(X, dtype=float)
    config.validate()
    if X.shape[1] != config.input_dim:
        raise ValueError(f"feature width {X.shape[1]} != input_dim {config.input_dim}")
    if model is None:
        model = init_model(config)
    else:
        model = model.copy()
    X_eval = X if X_val is None else np.asarray(X_val, dtype=float)
    rng = np.random.default_rng([config.seed, 1])
    lam = config.weight_decay
    lr = config.learning_rate

    params = model.params
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    n = X.shape[0]
    t0 = time.perf_counter()

    initial = loss(model, X)
    initial_val = reconstruction_loss(model, X_eval)
    if not np.isfinite(initial):
        raise TrainingDiverged(0, initial)
    train_curve: list[float] = []
    val_curve: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                _, gw, gb = gradients(model, X[idx], lam, rng)
            step += 1
            bc1 = 1.0 - ADAM_BETA1**step
            bc2 = 1.0 - ADAM_BETA2**step
            for j, g in enumerate([*gw, *gb]):
                m[j] *= ADAM_BETA1
                m[j] += (1.0 - ADAM_BETA1) * g
                v[j] *= ADAM_BETA2
                v[j] += (1.0 - ADAM_BETA2) * g * g
                params[j] -= lr * (m[j] / bc1) / (np.sqrt(v[j] / bc2) + ADAM_EPS)
        with np.errstate(over="ignore", invalid="ignore"):
            tl = loss(model, X) if _params_finite(model) else float("nan")
            vl = reconstruction_loss(model, X_eval) if np.isfinite(tl) else float("nan")
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise TrainingDiverged(epoch, tl)
        train_curve.append(tl)
        val_curve.append(vl)

    report = TrainReport(
        initial_loss=initial,
        initial_val_loss=initial_val,
        train_loss=train_curve,
        val_loss=val_curve,
        wall_time=time.perf_counter() - t0,
        param_norms=[float(np.linalg.norm(p)) for p in model.params],
    )
    return model, report


def _params_finite(model: MlpModel) -> bool:
    return all(np.all(np.isfinite(p)) for p in model.params)


def grid_search(
    X_train: np.ndarray,
    X_val: np.ndarray,
    base: MlpConfig,
    grid: dict[str, Sequence],
) -> tuple[MlpConfig, list[dict]]:
    """Train every point of the cartesian grid and keep the lowest val loss.

    Diverged runs are recorded with infinite losses.  Ties keep the earliest
    grid point (iteration order of ``grid`` keys, then of their values).
    """
    if not grid or any(len(vals) == 0 for vals in grid.values()):
        raise ValueError("grid must contain at least one point")
    keys = list(grid)
    table: list[dict] = []
    best_cfg, best_val = None, float("inf")
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = base.replace(**dict(zip(keys, combo)))
        row = dict(zip(keys, combo))
        try:
            _, rep = train(X_train, cfg, X_val=X_val)
            row["train_loss"] = rep.train_loss[-1]
            row["val_loss"] = rep.val_loss[-1]
        except TrainingDiverged:
            row["train_loss"] = float("inf")
            row["val_loss"] = float("inf")
        table.append(row)
        if best_cfg is None or row["val_loss"] < best_val:
            best_cfg, best_val = cfg, row["val_loss"]
    return best_cfg, table


def save_model(model: MlpModel, path: str | Path) -> None:
    """Write an .npz container holding the config (JSON) and every parameter."""
    arrays = {"config": np.array(json.dumps(dataclasses.asdict(model.config), sort_keys=True))}
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{k}"] = np.ascontiguousarray(w)
        arrays[f"b{k}"] = np.ascontiguousarray(b)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> MlpModel:
    with np.load(path, allow_pickle=False) as data:
        cfg = MlpConfig(**json.loads(str(data["config"])))
        n = len(cfg.layer_sizes) - 1
        weights = [data[f"W{k}"].copy() for k in range(n)]
        biases = [data[f"b{k}"].copy() for k in range(n)]
    return MlpModel(cfg, weights, biases)


def split_train_val(n: int, val_fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint shuffled index sets for tuning (90/10 by default)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])

