"""Dense-network kernel: forward/backward passes with exact reverse-mode
gradients, Adam/RMSProp optimizers, and learning-rate schedules.

Everything operates on float64 numpy arrays with samples in columns, so a
batch is (dim, B). Parameters live in per-layer arrays but expose a single
flat vector view for optimizers and checkpoints; the packing order is, per
layer: W (row-major), b, then gamma and beta when the layer carries batch
normalization. Running BN statistics are state, not trainables.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    InvalidSpecError,
    NonFiniteValuesError,
    SnapshotIOError,
)

ACTIVATIONS = ("linear", "relu", "elu", "tanh", "sigmoid")
ELU_ALPHA = 1.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.99

CHECKPOINT_MAGIC = b"NNCP"
CHECKPOINT_VERSION = 1


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "elu":
        return np.where(x > 0.0, x, ELU_ALPHA * np.expm1(x))
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise InvalidSpecError(f"unknown activation {name!r}")


def activate_grad(name: str, x: np.ndarray, y: np.ndarray,
                  g: np.ndarray) -> np.ndarray:
    """Chain an upstream gradient g through activation with input x, output y."""
    if name == "linear":
        return g
    if name == "relu":
        return g * (x > 0.0)
    if name == "elu":
        return g * np.where(x > 0.0, 1.0, y + ELU_ALPHA)
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "sigmoid":
        return g * y * (1.0 - y)
    raise InvalidSpecError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"
    batchnorm: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidSpecError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")


class MLPNet:
    """Stack of dense layers with optional per-layer batch normalization."""

    def __init__(self, layers, seed: int = 0):
        layers = tuple(layers)
        if not layers:
            raise InvalidSpecError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidSpecError(
                    f"layer dims incompatible: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = layers
        self.bn_momentum = BN_MOMENTUM
        rng = np.random.default_rng(seed)
        self.W = []
        self.b = []
        self.gamma = []
        self.beta = []
        self.run_mean = []
        self.run_var = []
        for spec in layers:
            # Glorot-uniform weights, zero bias
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            self.W.append(rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)))
            self.b.append(np.zeros(spec.out_dim))
            if spec.batchnorm:
                self.gamma.append(np.ones(spec.out_dim))
                self.beta.append(np.zeros(spec.out_dim))
                self.run_mean.append(np.zeros(spec.out_dim))
                self.run_var.append(np.ones(spec.out_dim))
            else:
                self.gamma.append(None)
                self.beta.append(None)
                self.run_mean.append(None)
                self.run_var.append(None)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_params(self) -> int:
        total = 0
        for i, spec in enumerate(self.layers):
            total += self.W[i].size + self.b[i].size
            if spec.batchnorm:
                total += 2 * spec.out_dim
        return total

    def get_params(self) -> np.ndarray:
        parts = []
        for i, spec in enumerate(self.layers):
            parts.append(self.W[i].ravel())
            parts.append(self.b[i])
            if spec.batchnorm:
                parts.append(self.gamma[i])
                parts.append(self.beta[i])
        return np.concatenate(parts)

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise DimensionMismatchError(
                f"parameter vector has {vec.size} entries, expected {self.n_params}"
            )
        pos = 0
        for i, spec in enumerate(self.layers):
            w = self.W[i]
            self.W[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.b[i] = vec[pos:pos + spec.out_dim].copy()
            pos += spec.out_dim
            if spec.batchnorm:
                self.gamma[i] = vec[pos:pos + spec.out_dim].copy()
                pos += spec.out_dim
                self.beta[i] = vec[pos:pos + spec.out_dim].copy()
                pos += spec.out_dim


def forward(net: MLPNet, x: np.ndarray, mode: str = "infer"):
    """Run the net; returns (output, cache) with cache feeding backward().

    Train mode normalizes with batch statistics and updates running stats;
    infer mode is deterministic and uses the stored running statistics.
    """
    if mode not in ("train", "infer"):
        raise InvalidSpecError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != net.in_dim:
        raise DimensionMismatchError(
            f"input shape {x.shape} incompatible with input dim {net.in_dim}"
        )
    cache = []
    h = x
    # overflow surfaces as the typed non-finite error below, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i, spec in enumerate(net.layers):
            x_in = h
            pre = net.W[i] @ h + net.b[i][:, None]
            bn_cache = None
            if spec.batchnorm:
                if mode == "train":
                    mu = pre.mean(axis=1)
                    var = pre.var(axis=1)
                    inv = 1.0 / np.sqrt(var + BN_EPS)
                    xhat = (pre - mu[:, None]) * inv[:, None]
                    m = net.bn_momentum
                    net.run_mean[i] = m * net.run_mean[i] + (1.0 - m) * mu
                    net.run_var[i] = m * net.run_var[i] + (1.0 - m) * var
                else:
                    inv = 1.0 / np.sqrt(net.run_var[i] + BN_EPS)
                    xhat = (pre - net.run_mean[i][:, None]) * inv[:, None]
                act_in = net.gamma[i][:, None] * xhat + net.beta[i][:, None]
                bn_cache = (xhat, inv, mode == "train")
            else:
                act_in = pre
            h = activate(spec.activation, act_in)
            cache.append((x_in, act_in, h, bn_cache))
    if not np.isfinite(h).all():
        raise NonFiniteValuesError("non-finite network output")
    return h, cache


def backward(net: MLPNet, cache, grad_out: np.ndarray):
    """Exact reverse-mode pass; returns (parameter gradient, input gradient).

    ``grad_out`` is dL/d(output) for the same batch that produced ``cache``.
    The parameter gradient is packed like get_params().
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if len(cache) != len(net.layers):
        raise DimensionMismatchError("cache does not match network depth")
    grads_w = [None] * len(net.layers)
    grads_b = [None] * len(net.layers)
    grads_gamma = [None] * len(net.layers)
    grads_beta = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        x_in, act_in, out, bn_cache = cache[i]
        if g.shape != out.shape:
            raise DimensionMismatchError("output gradient shape mismatch")
        g = activate_grad(spec.activation, act_in, out, g)
        if spec.batchnorm:
            xhat, inv, trained = bn_cache
            grads_beta[i] = g.sum(axis=1)
            grads_gamma[i] = (g * xhat).sum(axis=1)
            gx = g * net.gamma[i][:, None]
            if trained:
                nb = g.shape[1]
                s1 = gx.sum(axis=1, keepdims=True)
                s2 = (gx * xhat).sum(axis=1, keepdims=True)
                g = (inv[:, None] / nb) * (nb * gx - s1 - xhat * s2)
            else:
                g = gx * inv[:, None]
        grads_w[i] = g @ x_in.T
        grads_b[i] = g.sum(axis=1)
        g = net.W[i].T @ g
    parts = []
    for i, spec in enumerate(net.layers):
        parts.append(grads_w[i].ravel())
        parts.append(grads_b[i])
        if spec.batchnorm:
            parts.append(grads_gamma[i])
            parts.append(grads_beta[i])
    return np.concatenate(parts), g


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries and its gradient wrt pred."""
    if pred.shape != target.shape:
        raise DimensionMismatchError("prediction/target shape mismatch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


@dataclass(frozen=True)
class Schedule:
    kind: str  # constant | staircase | plateau
    interval: int = 0
    rate: float = 1.0
    patience: int = 0
    factor: float = 0.5
    min_delta: float = 1e-8

    @staticmethod
    def constant() -> "Schedule":
        return Schedule("constant")

    @staticmethod
    def staircase(interval: int, rate: float) -> "Schedule":
        if interval < 1 or not 0.0 < rate:
            raise InvalidSpecError("staircase needs interval >= 1 and rate > 0")
        return Schedule("staircase", interval=int(interval), rate=float(rate))

    @staticmethod
    def plateau(patience: int, factor: float) -> "Schedule":
        if patience < 1 or not 0.0 < factor < 1.0:
            raise InvalidSpecError("plateau needs patience >= 1 and factor in (0,1)")
        return Schedule("plateau", patience=int(patience), factor=float(factor))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "interval": self.interval, "rate": self.rate,
                "patience": self.patience, "factor": self.factor}

    @staticmethod
    def from_dict(d: dict) -> "Schedule":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return Schedule.constant()
        if kind == "staircase":
            return Schedule.staircase(d["interval"], d["rate"])
        if kind == "plateau":
            return Schedule.plateau(d["patience"], d["factor"])
        raise InvalidSpecError(f"unknown schedule kind {kind!r}")


class Optimizer:
    """Adam or momentum-RMSProp over a flat parameter vector.

    ``step`` observes the most recent training loss (for plateau decay),
    derives the epoch's learning rate, and applies one update.
    """

    def __init__(self, algorithm: str = "adam", lr: float = 1e-3,
                 schedule: Schedule | None = None, beta1: float = 0.9,
                 beta2: float = 0.999, rho: float = 0.9, momentum: float = 0.9,
                 eps: float = 1e-7):
        if algorithm not in ("adam", "rmsprop"):
            raise InvalidSpecError(f"unknown optimizer {algorithm!r}")
        if not lr > 0:
            raise InvalidSpecError("learning rate must be positive")
        self.algorithm = algorithm
        self.lr0 = float(lr)
        self.schedule = schedule or Schedule.constant()
        self.beta1 = beta1
        self.beta2 = beta2
        self.rho = rho
        self.momentum = momentum
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None
        self._u = None
        self._plateau_lr = float(lr)
        self._best = None
        self._stall = 0

    def _observe(self, loss: float) -> None:
        if self._best is None or loss < self._best - self.schedule.min_delta:
            self._best = loss
            self._stall = 0
            return
        self._stall += 1
        if self._stall >= self.schedule.patience:
            self._plateau_lr *= self.schedule.factor
            self._stall = 0

    def current_lr(self, epoch: int) -> float:
        if self.schedule.kind == "staircase":
            return self.lr0 * self.schedule.rate ** (epoch // self.schedule.interval)
        if self.schedule.kind == "plateau":
            return self._plateau_lr
        return self.lr0

    def step(self, net: MLPNet, grad: np.ndarray, epoch: int,
             loss: float | None = None) -> float:
        """Apply one update; returns the learning rate that was used."""
        grad = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(grad).all():
            raise NonFiniteValuesError("non-finite gradient")
        params = net.get_params()
        if grad.shape != params.shape:
            raise DimensionMismatchError(
                f"gradient length {grad.size} != parameter count {params.size}"
            )
        if loss is not None and self.schedule.kind == "plateau":
            self._observe(float(loss))
        lr = self.current_lr(epoch)

        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
            self._u = np.zeros_like(params)
        self.step_count += 1
        if self.algorithm == "adam":
            self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
            self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
            mhat = self._m / (1.0 - self.beta1 ** self.step_count)
            vhat = self._v / (1.0 - self.beta2 ** self.step_count)
            params = params - lr * mhat / (np.sqrt(vhat) + self.eps)
        else:
            self._v = self.rho * self._v + (1.0 - self.rho) * grad * grad
            self._u = self.momentum * self._u + lr * grad / np.sqrt(self._v + self.eps)
            params = params - self._u
        net.set_params(params)
        return lr


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    loss: float
    lr: float


def history_to_csv(history, path=None) -> str:
    lines = ["epoch,loss,lr"]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.loss!r},{rec.lr!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def save_checkpoint(path, header: dict, arrays) -> None:
    """JSON header + float64 LE blobs; shared by all model checkpoints."""
    header = dict(header)
    header["array_lengths"] = [int(np.asarray(a).size) for a in arrays]
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
            fh.write(payload)
            for a in arrays:
                fh.write(np.asarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise SnapshotIOError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise SnapshotIOError(f"file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    arrays = []
    for length in header.get("array_lengths", []):
        arrays.append(np.frombuffer(blob, dtype="<f8", count=length, offset=pos).copy())
        pos += 8 * length
    if pos != len(blob):
        raise DimensionMismatchError(f"{path}: blob length mismatch")
    return header, arrays


def net_header(net: MLPNet) -> dict:
    return {
        "kind": "mlp",
        "layers": [
            {"in": s.in_dim, "out": s.out_dim, "activation": s.activation,
             "batchnorm": s.batchnorm}
            for s in net.layers
        ],
        "bn_momentum": net.bn_momentum,
    }


def _net_state(net: MLPNet):
    stats = [np.concatenate([net.run_mean[i], net.run_var[i]])
             for i, s in enumerate(net.layers) if s.batchnorm]
    return [net.get_params()] + stats


def net_from_header(header: dict) -> MLPNet:
    layers = [LayerSpec(d["in"], d["out"], d["activation"], d["batchnorm"])
              for d in header["layers"]]
    return MLPNet(layers, seed=0)


def _restore_net_state(net: MLPNet, arrays) -> None:
    net.set_params(arrays[0])
    k = 1
    for i, s in enumerate(net.layers):
        if s.batchnorm:
            stat = arrays[k]
            net.run_mean[i] = stat[: s.out_dim].copy()
            net.run_var[i] = stat[s.out_dim:].copy()
            k += 1


def save_net(net: MLPNet, path) -> None:
    save_checkpoint(path, net_header(net), _net_state(net))


def load_net(path) -> MLPNet:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "mlp":
        raise CorruptHeaderError(f"{path}: checkpoint kind is not 'mlp'")
    net = net_from_header(header)
    _restore_net_state(net, arrays)
    return net
