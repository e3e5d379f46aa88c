"""Encoder/decoder pairs as the nonlinear alternative to an orthogonal basis.

One model handles one physical variable: snapshots are scaled into the
interval demanded by the decoder's output activation, compressed through the
bottleneck, and reconstructed by minimizing mean squared error. Per-epoch
losses are evaluated at the post-update parameters in inference mode, so the
final history entry matches a fresh encode/decode round trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .errors import (
    CorruptHeaderError,
    DataRangeError,
    DimensionMismatchError,
    InvalidSpecError,
    TrainingDivergedError,
)
from .pod import LatentTrajectory
from .snapstore import FieldLayout, SnapshotSet

FULL_BATCH_LIMIT = 4096
MINI_BATCH = 64

# decoder output activations with a bounded range force the matching
# scaling interval on the training data
_ACTIVATION_RANGE = {"sigmoid": (0.0, 1.0), "tanh": (-1.0, 1.0)}


def geometric_widths(n_in: int, n_out: int, n_hidden: int = 4) -> tuple[int, ...]:
    """Hidden widths interpolated geometrically between n_in and n_out."""
    if n_hidden == 0:
        return ()
    lo, hi = np.log(float(n_out)), np.log(float(n_in))
    frac = np.arange(1, n_hidden + 1) / (n_hidden + 1)
    widths = np.exp(hi + frac * (lo - hi))
    return tuple(max(int(round(w)), min(n_in, n_out)) for w in widths)


@dataclass(frozen=True)
class AESpec:
    input_dim: int
    latent_dim: int
    encoder_hidden: tuple[int, ...] | None = None
    decoder_hidden: tuple[int, ...] | None = None
    hidden_activation: str = "relu"
    encoder_output_activation: str = "linear"
    decoder_output_activation: str = "sigmoid"
    batchnorm: bool = False

    def __post_init__(self):
        if self.latent_dim >= self.input_dim:
            raise InvalidSpecError(
                f"latent dim {self.latent_dim} must be below input dim {self.input_dim}"
            )
        if self.latent_dim < 1:
            raise InvalidSpecError("latent dim must be >= 1")

    def encoder_widths(self) -> tuple[int, ...]:
        if self.encoder_hidden is not None:
            return tuple(self.encoder_hidden)
        return geometric_widths(self.input_dim, self.latent_dim)

    def decoder_widths(self) -> tuple[int, ...]:
        if self.decoder_hidden is not None:
            return tuple(self.decoder_hidden)
        return tuple(reversed(self.encoder_widths()))

    def scaling_interval(self) -> tuple[float, float] | None:
        """Interval the training data must occupy, or None if unconstrained."""
        return _ACTIVATION_RANGE.get(self.decoder_output_activation)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_widths()),
            "decoder_hidden": list(self.decoder_widths()),
            "hidden_activation": self.hidden_activation,
            "encoder_output_activation": self.encoder_output_activation,
            "decoder_output_activation": self.decoder_output_activation,
            "batchnorm": self.batchnorm,
        }

    @staticmethod
    def from_dict(d: dict) -> "AESpec":
        return AESpec(
            input_dim=int(d["input_dim"]),
            latent_dim=int(d["latent_dim"]),
            encoder_hidden=tuple(d["encoder_hidden"]) if d.get("encoder_hidden") is not None else None,
            decoder_hidden=tuple(d["decoder_hidden"]) if d.get("decoder_hidden") is not None else None,
            hidden_activation=d.get("hidden_activation", "relu"),
            encoder_output_activation=d.get("encoder_output_activation", "linear"),
            decoder_output_activation=d.get("decoder_output_activation", "sigmoid"),
            batchnorm=bool(d.get("batchnorm", False)),
        )


@dataclass
class AEModel:
    spec: AESpec
    encoder: nn.MLPNet
    decoder: nn.MLPNet
    history: list = field(default_factory=list)
    field_name: str = "u"

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.encoder.get_params(), self.decoder.get_params()])

    def set_params(self, vec: np.ndarray) -> None:
        ne = self.encoder.n_params
        self.encoder.set_params(vec[:ne])
        self.decoder.set_params(vec[ne:])


class _AEParamProxy:
    """Adapts the encoder+decoder pair to the optimizer's net interface."""

    def __init__(self, model: AEModel):
        self._model = model
        self.n_params = model.encoder.n_params + model.decoder.n_params

    def get_params(self):
        return self._model.get_params()

    def set_params(self, vec):
        self._model.set_params(vec)


def build(spec: AESpec, seed: int = 0, field_name: str = "u") -> AEModel:
    """Seeded deterministic construction of the encoder/decoder pair."""
    hid = spec.hidden_activation
    enc_dims = (spec.input_dim, *spec.encoder_widths(), spec.latent_dim)
    dec_dims = (spec.latent_dim, *spec.decoder_widths(), spec.input_dim)
    enc_layers = [
        nn.LayerSpec(enc_dims[i], enc_dims[i + 1],
                     hid if i < len(enc_dims) - 2 else spec.encoder_output_activation,
                     batchnorm=spec.batchnorm and i < len(enc_dims) - 2)
        for i in range(len(enc_dims) - 1)
    ]
    dec_layers = [
        nn.LayerSpec(dec_dims[i], dec_dims[i + 1],
                     hid if i < len(dec_dims) - 2 else spec.decoder_output_activation,
                     batchnorm=spec.batchnorm and i < len(dec_dims) - 2)
        for i in range(len(dec_dims) - 1)
    ]
    rng = np.random.default_rng(seed)
    enc_seed, dec_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    return AEModel(spec, nn.MLPNet(enc_layers, seed=enc_seed),
                   nn.MLPNet(dec_layers, seed=dec_seed), [], field_name)


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, SnapshotSet):
        return data.data
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatchError("training data must be a 2-D matrix")
    return x


def _check_range(spec: AESpec, x: np.ndarray) -> None:
    interval = spec.scaling_interval()
    if interval is None:
        return
    lo, hi = interval
    if x.min() < lo - 1e-12 or x.max() > hi + 1e-12:
        raise DataRangeError(
            f"data in [{x.min():g}, {x.max():g}] but decoder activation "
            f"{spec.decoder_output_activation!r} requires [{lo:g}, {hi:g}]"
        )


def _reconstruction_mse(model: AEModel, x: np.ndarray) -> float:
    z, _ = nn.forward(model.encoder, x, "infer")
    xr, _ = nn.forward(model.decoder, z, "infer")
    return nn.mse_loss(xr, x)[0]


def train(model: AEModel, data, epochs: int,
          optimizer: nn.Optimizer | None = None, seed: int = 0) -> list:
    """Minimize the mean squared reconstruction error.

    Full-batch gradients below FULL_BATCH_LIMIT samples, otherwise seeded
    mini-batches of 64. Appends per-epoch LossRecords to the model history
    and returns the records added by this call.
    """
    x = _as_matrix(data)
    if x.shape[0] != model.spec.input_dim:
        raise DimensionMismatchError(
            f"data has {x.shape[0]} rows, model expects {model.spec.input_dim}"
        )
    _check_range(model.spec, x)
    if optimizer is None:
        optimizer = nn.Optimizer("adam", lr=1e-3, schedule=nn.Schedule.plateau(200, 0.5))

    proxy = _AEParamProxy(model)
    n_samples = x.shape[1]
    full_batch = n_samples <= FULL_BATCH_LIMIT
    rng = np.random.default_rng(seed)
    start_epoch = len(model.history)
    added: list[nn.LossRecord] = []
    last_loss: float | None = model.history[-1].loss if model.history else None

    for e in range(start_epoch, start_epoch + epochs):
        if full_batch:
            batches = [x]
        else:
            order = rng.permutation(n_samples)
            batches = [x[:, order[i:i + MINI_BATCH]]
                       for i in range(0, n_samples, MINI_BATCH)]
        lr_used = None
        for xb in batches:
            z, ce = nn.forward(model.encoder, xb, "train")
            xr, cd = nn.forward(model.decoder, z, "train")
            batch_loss, g = nn.mse_loss(xr, xb)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {e}", history=model.history
                )
            gd, gz = nn.backward(model.decoder, cd, g)
            ge, _ = nn.backward(model.encoder, ce, gz)
            lr_used = optimizer.step(proxy, np.concatenate([ge, gd]), e, loss=last_loss)
        loss = _reconstruction_mse(model, x)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {e}", history=model.history
            )
        last_loss = loss
        rec = nn.LossRecord(e, loss, lr_used)
        model.history.append(rec)
        added.append(rec)
    return added


def encode(model: AEModel, snap) -> LatentTrajectory:
    """Latent coefficients for each column of a (scaled) snapshot set."""
    x = _as_matrix(snap)
    z, _ = nn.forward(model.encoder, x, "infer")
    times = snap.times if isinstance(snap, SnapshotSet) else np.arange(x.shape[1], dtype=float)
    return LatentTrajectory(z, times)


def decode(model: AEModel, latent: LatentTrajectory) -> SnapshotSet:
    """Reconstruction in scaled space as a single-field snapshot set."""
    if latent.dim != model.spec.latent_dim:
        raise DimensionMismatchError(
            f"latent has {latent.dim} rows, model expects {model.spec.latent_dim}"
        )
    xr, _ = nn.forward(model.decoder, latent.z, "infer")
    fields = (FieldLayout(model.field_name, 0, model.spec.input_dim),)
    return SnapshotSet(xr, latent.times, fields)


def encode_matrix(model: AEModel, x: np.ndarray) -> np.ndarray:
    return nn.forward(model.encoder, x, "infer")[0]


def decode_matrix(model: AEModel, z: np.ndarray) -> np.ndarray:
    return nn.forward(model.decoder, z, "infer")[0]


def save(model: AEModel, path) -> None:
    header = {
        "kind": "autoencoder",
        "spec": model.spec.to_dict(),
        "field_name": model.field_name,
        "encoder": nn.net_header(model.encoder),
        "decoder": nn.net_header(model.decoder),
        "n_encoder_arrays": len(nn._net_state(model.encoder)),
    }
    arrays = nn._net_state(model.encoder) + nn._net_state(model.decoder)
    nn.save_checkpoint(path, header, arrays)


def load(path) -> AEModel:
    header, arrays = nn.load_checkpoint(path)
    if header.get("kind") != "autoencoder":
        raise CorruptHeaderError(f"{path}: checkpoint kind is not 'autoencoder'")
    encoder = nn.net_from_header(header["encoder"])
    decoder = nn.net_from_header(header["decoder"])
    k = header["n_encoder_arrays"]
    nn._restore_net_state(encoder, arrays[:k])
    nn._restore_net_state(decoder, arrays[k:])
    return AEModel(AESpec.from_dict(header["spec"]), encoder, decoder, [],
                   header.get("field_name", "u"))
