"""Imputation baselines for missing modalities.

Two ways of completing a case before a conventional network sees it:

* mean filling: normalized modalities have zero mean, so a missing image is
  replaced by zeros;
* MLP imputation: one small regressor per (missing modality, available set)
  predicts the missing intensity from the co-located available intensities.
  With four modalities that is 28 regressors.

The downstream network is the same architecture as HeMIS, trained with all
modalities present on every batch.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from . import layers
from .model import HemisParams, ModalityMask, segment
from .tensor import (BadMagicError, FormatError, TruncatedFileError, VersionError,
                     htf_bytes, make_rng, read_htf)
from .training import TrainConfig, TrainResult, train

IMP_MAGIC = b"IMP1"
IMP_VERSION = 1


def mean_fill(case, mask: ModalityMask):
    """Copy of ``case`` with every absent modality replaced by zeros."""
    if not isinstance(mask, ModalityMask):
        mask = ModalityMask(mask)
    images = case.images.copy()
    for k, avail in enumerate(mask.available):
        if not avail:
            images[k] = 0
    return replace(case, images=images)


def mean_fill_images(images, mask: ModalityMask):
    """Batch variant on a ``(..., N, H, W)`` array."""
    out = np.array(images, copy=True)
    for k, avail in enumerate(mask.available):
        if not avail:
            out[..., k, :, :] = 0
    return out


def mask_bits(indices) -> int:
    return sum(1 << i for i in indices)


def imputation_configurations(n: int):
    """All ``(target, available_indices)`` pairs with ``target`` missing."""
    pairs = []
    for size in range(1, n):
        for avail in combinations(range(n), size):
            for t in range(n):
                if t not in avail:
                    pairs.append((t, avail))
    return pairs


def pixel_features(images, available, neighborhood: int = 1):
    """Per-pixel regressor inputs from ``(..., N, H, W)`` images.

    Returns ``(..., H, W, F)`` where ``F = len(available) * neighborhood**2``;
    neighbourhoods are zero-padded at the border.
    """
    images = np.asarray(images)
    chans = images[..., list(available), :, :]
    if neighborhood == 1:
        return np.moveaxis(chans, -3, -1)
    r = neighborhood // 2
    h, w = images.shape[-2:]
    pad = [(0, 0)] * (chans.ndim - 2) + [(r, r), (r, r)]
    cp = np.pad(chans, pad)
    feats = [cp[..., i:i + h, j:j + w] for i in range(neighborhood) for j in range(neighborhood)]
    stacked = np.stack(feats, axis=-3)  # (..., C, n*n, H, W)
    stacked = stacked.reshape(stacked.shape[:-4] + (-1, h, w))
    return np.moveaxis(stacked, -3, -1)


@dataclass
class ImputationMlp:
    target: int
    available: tuple
    weights: list  # [W1, b1, W2, b2, W3, b3]
    neighborhood: int = 1

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    def forward(self, x):
        w1, b1, w2, b2, w3, b3 = self.weights
        h1, c1 = layers.dense_forward(x, w1, b1)
        a1, r1 = layers.relu_forward(h1)
        h2, c2 = layers.dense_forward(a1, w2, b2)
        a2, r2 = layers.relu_forward(h2)
        out, c3 = layers.dense_forward(a2, w3, b3)
        return out[..., 0], (c1, r1, c2, r2, c3)

    def backward(self, grad_out, cache):
        c1, r1, c2, r2, c3 = cache
        g, gw3, gb3 = layers.dense_backward(grad_out[..., None], c3)
        g = layers.relu_backward(g, r2)
        g, gw2, gb2 = layers.dense_backward(g, c2)
        g = layers.relu_backward(g, r1)
        _, gw1, gb1 = layers.dense_backward(g, c1)
        return [gw1, gb1, gw2, gb2, gw3, gb3]

    def predict(self, x):
        return self.forward(x)[0]

    def predict_image(self, images):
        """Imputed ``(..., H, W)`` target image from ``(..., N, H, W)`` inputs."""
        return self.predict(pixel_features(images, self.available, self.neighborhood))


def init_mlp(target, available, n_inputs, rng, hidden=(100, 100), neighborhood=1, dtype=np.float32):
    sizes = [n_inputs, *hidden, 1]
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append((rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        weights.append(np.zeros(fan_out, dtype=dtype))
    return ImputationMlp(target, tuple(available), weights, neighborhood)


def fit_mlp(mlp: ImputationMlp, x, y, rng, steps=2000, batch_size=128, learning_rate=0.01,
            momentum=0.9, decay=1e-4):
    """Minimize mean squared error with Nesterov SGD; returns the final training MSE."""
    params = dict(enumerate(mlp.weights))
    opt = layers.SgdState(learning_rate, momentum, decay)
    for _ in range(steps):
        idx = rng.integers(len(y), size=batch_size)
        pred, cache = mlp.forward(x[idx])
        err = pred - y[idx]
        grads = mlp.backward((2.0 / batch_size) * err, cache)
        layers.sgd_nesterov_step(params, dict(enumerate(grads)), opt)
    return float(np.mean((mlp.predict(x) - y) ** 2))


@dataclass
class ImputationBundle:
    models: dict  # (target, available bitmask) -> ImputationMlp
    n_modalities: int
    neighborhood: int = 1
    modality_names: tuple = ()

    def get(self, target: int, available) -> ImputationMlp:
        key = (target, mask_bits(available))
        if key not in self.models:
            raise KeyError(f"no imputation model for target {target} given modalities {tuple(available)}")
        return self.models[key]

    def __len__(self):
        return len(self.models)


def train_imputation_mlps(train_cases, n_samples: int = 20000, steps: int = 2000, batch_size: int = 128,
                          learning_rate: float = 0.01, hidden=(100, 100), neighborhood: int = 1,
                          seed: int = 0, configurations=None) -> ImputationBundle:
    """Fit one pixelwise regressor per (missing target, available set)."""
    images = np.stack([c.images for c in train_cases]).astype(np.float32)
    n_mod = images.shape[1]
    rng = make_rng(seed)
    # shared pixel sample; per-model seeds keep each fit reproducible on its own
    ci = rng.integers(images.shape[0], size=n_samples)
    yy = rng.integers(images.shape[2], size=n_samples)
    xx = rng.integers(images.shape[3], size=n_samples)
    models = {}
    for target, avail in (configurations or imputation_configurations(n_mod)):
        feats = pixel_features(images, avail, neighborhood)[ci, yy, xx]
        y = images[ci, target, yy, xx]
        model_rng = make_rng(np.random.SeedSequence([seed, target, mask_bits(avail)]))
        mlp = init_mlp(target, avail, feats.shape[-1], model_rng, hidden, neighborhood)
        fit_mlp(mlp, feats, y, model_rng, steps, batch_size, learning_rate)
        models[(target, mask_bits(avail))] = mlp
    names = tuple(train_cases[0].modality_names) if train_cases else ()
    return ImputationBundle(models, n_mod, neighborhood, names)


def mlp_impute_images(images, mask: ModalityMask, bundle: ImputationBundle):
    """Batch variant of :func:`mlp_impute` on ``(..., N, H, W)`` images."""
    out = np.array(images, dtype=np.float32, copy=True)
    avail = mask.indices
    for t, present in enumerate(mask.available):
        if not present:
            out[..., t, :, :] = bundle.get(t, avail).predict_image(images)
    return out


def mlp_impute(case, mask: ModalityMask, bundle: ImputationBundle):
    """Copy of ``case`` with each absent modality predicted from the available ones."""
    if not isinstance(mask, ModalityMask):
        mask = ModalityMask(mask)
    return replace(case, images=mlp_impute_images(case.images, mask, bundle))


def train_baseline_network(params: HemisParams, train_cases, valid_cases, config: TrainConfig) -> TrainResult:
    """Same architecture and schedule, but every batch sees all modalities."""
    return train(params, train_cases, valid_cases, replace(config, drop_modalities=False))


def baseline_segment(images, mask: ModalityMask, params: HemisParams, fill: str = "mean", bundle=None):
    """Complete the missing modalities, then run the full-mask forward pass."""
    if fill == "mean":
        completed = mean_fill_images(images, mask)
    elif fill == "mlp":
        if bundle is None:
            raise ValueError("MLP filling needs an imputation bundle")
        completed = mlp_impute_images(images, mask, bundle)
    else:
        raise ValueError(f"unknown fill method {fill!r}")
    return segment(completed, ModalityMask.full(mask.n), params)


# --- IMP1 bundle file ------------------------------------------------------
#
#   b"IMP1" | u32 header length | UTF-8 JSON header
#   then per model: u8 target | u32 available bitmask | 6 HTF blobs

def bundle_bytes(bundle: ImputationBundle) -> bytes:
    header = json.dumps({"format_version": IMP_VERSION, "n_modalities": bundle.n_modalities,
                         "neighborhood": bundle.neighborhood, "count": len(bundle.models),
                         "modality_names": list(bundle.modality_names)}, sort_keys=True).encode("utf-8")
    out = [IMP_MAGIC, struct.pack("<I", len(header)), header]
    for (target, bits) in sorted(bundle.models):
        mlp = bundle.models[(target, bits)]
        out.append(struct.pack("<BI", target, bits))
        out.extend(htf_bytes(w) for w in mlp.weights)
    return b"".join(out)


def save_bundle(bundle: ImputationBundle, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_bytes(bundle))


def load_bundle(path: str | os.PathLike) -> ImputationBundle:
    with open(path, "rb") as fh:
        stream = io.BytesIO(fh.read())
    magic = stream.read(4)
    if len(magic) < 4:
        raise TruncatedFileError("truncated imputation bundle while reading magic")
    if magic != IMP_MAGIC:
        raise BadMagicError(f"bad imputation bundle magic {magic!r}")
    raw = stream.read(4)
    if len(raw) < 4:
        raise TruncatedFileError("truncated imputation bundle header")
    (hlen,) = struct.unpack("<I", raw)
    raw = stream.read(hlen)
    if len(raw) < hlen:
        raise TruncatedFileError("truncated imputation bundle header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed imputation bundle header: {exc}") from exc
    if header.get("format_version") != IMP_VERSION:
        raise VersionError(f"unsupported bundle version {header.get('format_version')}")
    n_mod, nb = int(header["n_modalities"]), int(header["neighborhood"])
    models = {}
    for _ in range(int(header["count"])):
        raw = stream.read(5)
        if len(raw) < 5:
            raise TruncatedFileError("truncated imputation bundle record")
        target, bits = struct.unpack("<BI", raw)
        weights = [read_htf(stream) for _ in range(6)]
        avail = tuple(i for i in range(n_mod) if bits >> i & 1)
        models[(target, bits)] = ImputationMlp(target, avail, weights, nb)
    if stream.read(1):
        raise FormatError("trailing bytes after the last imputation record")
    return ImputationBundle(models, n_mod, nb, tuple(header.get("modality_names", ())))
