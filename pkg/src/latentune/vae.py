"""Deterministic encoder/decoder pair mapping the unit parameter box to a
low-dimensional latent box.

Architecture is a fixed layer schedule: the encoder contracts through
floor(d/2) and floor(d/4) ReLU layers to a sigmoid latent layer, the decoder
mirrors it back up to a sigmoid output, so both latent and reconstruction
live strictly inside (0, 1). The training loss is reconstruction MSE plus a
KL penalty pulling the *batch statistics* of the latent encodings toward a
standard normal; the encoder itself has no sampling step, which keeps every
gradient exact and checkable against finite differences.

Backpropagation and Adam are implemented directly on the layer arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from latentune.params import DimensionMismatch, InvalidConfig

SIGMA_FLOOR = 1e-6  # keeps log(sigma^2) finite on collapsed batches


class BatchTooSmall(ValueError):
    """Batch statistics need at least two samples."""


class InsufficientData(RuntimeError):
    """Not enough training samples for the configured batch size."""


@dataclass
class MlpLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str  # "relu" or "sigmoid"

    def __post_init__(self):
        if self.activation not in ("relu", "sigmoid"):
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise DimensionMismatch("bias length must match output width")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class VaeModel:
    encoder: list[MlpLayer]
    decoder: list[MlpLayer]
    d_high: int
    d_low: int
    kl_weight: float = 1.0

    def layers(self) -> list[MlpLayer]:
        return self.encoder + self.decoder


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators."""

    learning_rate: float
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: VaeModel, learning_rate: float) -> "AdamState":
        st = cls(learning_rate=learning_rate)
        for layer in model.layers():
            st.m_w.append(np.zeros_like(layer.weights))
            st.v_w.append(np.zeros_like(layer.weights))
            st.m_b.append(np.zeros_like(layer.biases))
            st.v_b.append(np.zeros_like(layer.biases))
        return st

    def update(self, model: VaeModel, grads_w: list, grads_b: list) -> None:
        self.step += 1
        b1c = 1.0 - self.beta1**self.step
        b2c = 1.0 - self.beta2**self.step
        for i, layer in enumerate(model.layers()):
            self.m_w[i] = self.beta1 * self.m_w[i] + (1 - self.beta1) * grads_w[i]
            self.v_w[i] = self.beta2 * self.v_w[i] + (1 - self.beta2) * grads_w[i] ** 2
            layer.weights -= (
                self.learning_rate * (self.m_w[i] / b1c) / (np.sqrt(self.v_w[i] / b2c) + self.eps)
            )
            self.m_b[i] = self.beta1 * self.m_b[i] + (1 - self.beta1) * grads_b[i]
            self.v_b[i] = self.beta2 * self.v_b[i] + (1 - self.beta2) * grads_b[i] ** 2
            layer.biases -= (
                self.learning_rate * (self.m_b[i] / b1c) / (np.sqrt(self.v_b[i] / b2c) + self.eps)
            )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    n_epochs: int = 500
    patience: int = 50
    kl_weight: float = 1.0
    holdout_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def layer_schedule(d_high: int, d_low: int) -> tuple[list[int], list[int]]:
    """Encoder/decoder output widths; tiny dims keep at least one unit."""
    h2 = max(1, d_high // 2)
    h4 = max(1, d_high // 4)
    return [h2, h4, d_low], [h4, h2, d_high]


def build_model(
    d_high: int,
    d_low: int,
    seed: int = 0,
    kl_weight: float = 1.0,
    init_data: Optional[np.ndarray] = None,
) -> VaeModel:
    """Glorot-uniform initialized model with the fixed layer schedule.

    Unit-box data is not zero-centered, so zero biases leave a large fraction
    of ReLU units dead from the first step (fatal in the narrow floor(d/4)
    layers). When init_data is given, each bias is set so the preactivation of
    the running data mean sits slightly positive, which keeps every unit alive
    at initialization without touching the weight distribution.
    """
    if d_low < 1 or d_high < 1:
        raise InvalidConfig("dimensions must be >= 1")
    if d_low > d_high:
        raise InvalidConfig("latent dimension cannot exceed the input dimension")
    enc_sizes, dec_sizes = layer_schedule(d_high, d_low)
    rng = np.random.default_rng(seed)

    carry = None
    if init_data is not None:
        carry = np.atleast_2d(np.asarray(init_data, dtype=float))

    def make_layers(in_dim: int, sizes: list[int]) -> list[MlpLayer]:
        nonlocal carry
        layers = []
        for i, out_dim in enumerate(sizes):
            bound = math.sqrt(6.0 / (in_dim + out_dim))
            w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
            act = "sigmoid" if i == len(sizes) - 1 else "relu"
            b = np.zeros(out_dim)
            if carry is not None:
                b = -(w @ carry.mean(axis=0))
                if act == "relu":
                    b += 0.05
            layer = MlpLayer(w, b, act)
            if carry is not None:
                carry = _act(carry @ w.T + b, act)
            layers.append(layer)
            in_dim = out_dim
        return layers

    return VaeModel(
        encoder=make_layers(d_high, enc_sizes),
        decoder=make_layers(d_low, dec_sizes),
        d_high=d_high,
        d_low=d_low,
        kl_weight=kl_weight,
    )


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    return 1.0 / (1.0 + np.exp(-a))


def _act_grad(a: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(float)
    return h * (1.0 - h)


def _forward_stack(layers: list[MlpLayer], x: np.ndarray):
    """Returns (output, per-layer cache of (input, preactivation, output))."""
    cache = []
    h = x
    for layer in layers:
        a = h @ layer.weights.T + layer.biases
        out = _act(a, layer.activation)
        cache.append((h, a, out))
        h = out
    return h, cache


def _backward_stack(layers: list[MlpLayer], cache, grad_out: np.ndarray):
    """Backprop a stack; returns (grad wrt stack input, weight grads, bias grads)."""
    grads_w = [None] * len(layers)
    grads_b = [None] * len(layers)
    g = grad_out
    for i in reversed(range(len(layers))):
        x_in, a, out = cache[i]
        da = g * _act_grad(a, out, layers[i].activation)
        grads_w[i] = da.T @ x_in
        grads_b[i] = da.sum(axis=0)
        g = da @ layers[i].weights
    return g, grads_w, grads_b


def _check_vector(v: np.ndarray, dim: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != dim:
        raise DimensionMismatch(f"{what} must have length {dim}, got shape {v.shape}")
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise InvalidConfig(f"{what} entries must lie in [0, 1]")
    return v


def encode(model: VaeModel, theta: np.ndarray) -> np.ndarray:
    """Deterministic forward pass to the latent box (0, 1)^d_low."""
    theta = _check_vector(theta, model.d_high, "theta")
    z, _ = _forward_stack(model.encoder, theta[None, :])
    return z[0]


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    """Deterministic forward pass back to the unit parameter box."""
    z = _check_vector(z, model.d_low, "z")
    x, _ = _forward_stack(model.decoder, z[None, :])
    return x[0]


def encode_batch(model: VaeModel, batch: np.ndarray) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[1] != model.d_high:
        raise DimensionMismatch(
            f"batch has {batch.shape[1]} columns, model expects {model.d_high}"
        )
    z, _ = _forward_stack(model.encoder, batch)
    return z


def decode_batch(model: VaeModel, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != model.d_low:
        raise DimensionMismatch(
            f"batch has {z.shape[1]} columns, model expects {model.d_low}"
        )
    x, _ = _forward_stack(model.decoder, z)
    return x


def _batch_kl(z: np.ndarray):
    """KL of the batch latent statistics against N(0, I), plus backprop data."""
    b = z.shape[0]
    mu = z.mean(axis=0)
    var = np.maximum(z.var(axis=0), SIGMA_FLOOR**2)
    kl = 0.5 * float(np.sum(mu**2 + var - 1.0 - np.log(var)))
    floored = z.var(axis=0) < SIGMA_FLOOR**2
    # d kl / d z: through the mean and (unless floored) the variance
    dkl_dz = mu[None, :] / b + np.where(
        floored[None, :], 0.0, (1.0 - 1.0 / var)[None, :] * (z - mu[None, :]) / b
    )
    return kl, dkl_dz


def loss(model: VaeModel, batch: np.ndarray):
    """Total, reconstruction, and KL loss of one batch.

    mse averages the squared reconstruction norm over the batch; kl compares
    the empirical mean/std of each latent coordinate against the standard
    normal. total = mse + kl_weight * kl.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] < 2:
        raise BatchTooSmall("batch statistics require at least 2 samples")
    if batch.shape[1] != model.d_high:
        raise DimensionMismatch(
            f"batch has {batch.shape[1]} columns, model expects {model.d_high}"
        )
    z, _ = _forward_stack(model.encoder, batch)
    recon, _ = _forward_stack(model.decoder, z)
    mse = float(np.sum((recon - batch) ** 2)) / batch.shape[0]
    kl, _ = _batch_kl(z)
    return mse + model.kl_weight * kl, mse, kl


def loss_and_grads(model: VaeModel, batch: np.ndarray):
    """Loss triple plus gradients for every weight and bias (encoder+decoder)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] < 2:
        raise BatchTooSmall("batch statistics require at least 2 samples")
    b = batch.shape[0]
    z, enc_cache = _forward_stack(model.encoder, batch)
    recon, dec_cache = _forward_stack(model.decoder, z)

    mse = float(np.sum((recon - batch) ** 2)) / b
    kl, dkl_dz = _batch_kl(z)
    total = mse + model.kl_weight * kl

    dmse_drecon = 2.0 * (recon - batch) / b
    dz_recon, dec_gw, dec_gb = _backward_stack(model.decoder, dec_cache, dmse_drecon)
    dz = dz_recon + model.kl_weight * dkl_dz
    _, enc_gw, enc_gb = _backward_stack(model.encoder, enc_cache, dz)
    return (total, mse, kl), enc_gw + dec_gw, enc_gb + dec_gb


def gradient_check(model: VaeModel, batch: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central finite differences."""
    (_, _, _), grads_w, grads_b = loss_and_grads(model, batch)
    layers = model.layers()
    worst = 0.0

    def fd_at(arr: np.ndarray, idx) -> float:
        orig = arr[idx]
        arr[idx] = orig + step
        up, _, _ = loss(model, batch)
        arr[idx] = orig - step
        dn, _, _ = loss(model, batch)
        arr[idx] = orig
        return (up - dn) / (2.0 * step)

    for li, layer in enumerate(layers):
        for arr, grad in ((layer.weights, grads_w[li]), (layer.biases, grads_b[li])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                fd = fd_at(arr, idx)
                ana = float(grad[idx])
                rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-4)
                worst = max(worst, rel)
    return worst


def clone_model(model: VaeModel) -> VaeModel:
    return VaeModel(
        encoder=[
            MlpLayer(l.weights.copy(), l.biases.copy(), l.activation)
            for l in model.encoder
        ],
        decoder=[
            MlpLayer(l.weights.copy(), l.biases.copy(), l.activation)
            for l in model.decoder
        ],
        d_high=model.d_high,
        d_low=model.d_low,
        kl_weight=model.kl_weight,
    )


def train(
    samples: np.ndarray,
    d_low: int,
    config: Optional[TrainConfig] = None,
) -> VaeModel:
    """Train on unit-box samples; returns the best-validation-loss model.

    Mini-batches are reshuffled every epoch, a 10% holdout drives model
    selection and early stopping, and a trailing batch of fewer than two
    samples is dropped because its latent statistics are undefined.
    """
    cfg = config or TrainConfig()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d_high = samples.shape
    if n < 2 * cfg.batch_size:
        raise InsufficientData(
            f"need at least {2 * cfg.batch_size} samples, got {n}"
        )
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(2, int(round(cfg.holdout_fraction * n)))
    val = samples[order[:n_val]]
    tr = samples[order[n_val:]]

    model = build_model(
        d_high, d_low, seed=cfg.seed, kl_weight=cfg.kl_weight, init_data=tr
    )
    adam = AdamState.for_model(model, cfg.learning_rate)

    best = clone_model(model)
    best_val = math.inf
    since_best = 0
    for _ in range(cfg.n_epochs):
        idx = rng.permutation(len(tr))
        for start in range(0, len(tr), cfg.batch_size):
            chunk = tr[idx[start : start + cfg.batch_size]]
            if chunk.shape[0] < 2:
                continue
            _, gw, gb = loss_and_grads(model, chunk)
            adam.update(model, gw, gb)
        val_total, _, _ = loss(model, val)
        if val_total < best_val:
            best_val = val_total
            best = clone_model(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return best


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(
    model: VaeModel, path: str | Path, training_config: Optional[dict] = None
) -> None:
    """Single JSON file: header plus row-major full-precision weight arrays."""
    enc_sizes, dec_sizes = (
        [l.out_dim for l in model.encoder],
        [l.out_dim for l in model.decoder],
    )
    rec = {
        "d_high": model.d_high,
        "d_low": model.d_low,
        "kl_weight": model.kl_weight,
        "encoder_sizes": enc_sizes,
        "decoder_sizes": dec_sizes,
        "activations": {
            "encoder": [l.activation for l in model.encoder],
            "decoder": [l.activation for l in model.decoder],
        },
        "training_config": training_config or {},
        "layers": [
            {"weights": [list(row) for row in l.weights], "biases": list(l.biases)}
            for l in model.layers()
        ],
    }
    with Path(path).open("w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path: str | Path) -> VaeModel:
    with Path(path).open() as fh:
        rec = json.load(fh)
    acts = rec["activations"]["encoder"] + rec["activations"]["decoder"]
    layers = [
        MlpLayer(
            np.array(spec["weights"], dtype=float),
            np.array(spec["biases"], dtype=float),
            act,
        )
        for spec, act in zip(rec["layers"], acts)
    ]
    n_enc = len(rec["encoder_sizes"])
    return VaeModel(
        encoder=layers[:n_enc],
        decoder=layers[n_enc:],
        d_high=int(rec["d_high"]),
        d_low=int(rec["d_low"]),
        kl_weight=float(rec["kl_weight"]),
    )
