"""Hetero-modal segmentation network.

Each available modality goes through its own two-layer convolutional back end
(conv-ReLU-conv-ReLU-maxpool). The resulting feature stacks are fused by their
per-map mean and unbiased variance across the available modalities, the two
moment stacks are concatenated, and a two-layer convolutional front end turns
them into pixelwise class posteriors.

Absent modalities are never read: there is no imputation or placeholder
input anywhere in the forward pass.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import layers
from .layers import ConvLayer
from .tensor import (BadMagicError, FormatError, MissingEntryError, TruncatedFileError,
                     VersionError, htf_bytes, read_htf)

MODALITY_NAMES = ("F", "T1", "T1c", "T2")
HMZ_MAGIC = b"HMZ1"
HMZ_VERSION = 1


@dataclass(frozen=True)
class ModalityMask:
    available: tuple

    def __post_init__(self):
        avail = tuple(bool(a) for a in self.available)
        object.__setattr__(self, "available", avail)
        if not any(avail):
            raise ValueError("at least one modality must be available")

    @classmethod
    def full(cls, n: int) -> "ModalityMask":
        return cls((True,) * n)

    @classmethod
    def from_indices(cls, indices: Iterable[int], n: int) -> "ModalityMask":
        indices = list(indices)
        if any(not 0 <= i < n for i in indices):
            raise ValueError(f"modality index out of range for N={n}: {indices}")
        return cls(tuple(i in indices for i in range(n)))

    @classmethod
    def from_names(cls, names: Iterable[str], all_names: Sequence[str]) -> "ModalityMask":
        names = [s.strip() for s in names if s.strip()]
        unknown = [s for s in names if s not in all_names]
        if unknown:
            raise ValueError(f"unknown modality names {unknown}; expected a subset of {list(all_names)}")
        return cls.from_indices([list(all_names).index(s) for s in names], len(all_names))

    @property
    def n(self) -> int:
        return len(self.available)

    @property
    def indices(self) -> tuple:
        return tuple(i for i, a in enumerate(self.available) if a)

    @property
    def is_full(self) -> bool:
        return all(self.available)

    @property
    def key(self) -> str:
        """Bit string in modality order, e.g. ``"1011"``."""
        return "".join("1" if a else "0" for a in self.available)

    def __len__(self):
        return len(self.indices)


# Row order of the four-modality missing-data table (presence of F, T1, T1c, T2).
TABLE_ORDER_4 = ("0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101",
                 "1001", "1010", "1110", "1101", "1011", "0111", "1111")


def all_subsets(n: int) -> list:
    """Every non-empty mask, in results-table row order.

    Four modalities use a fixed layout (singles, pairs, triples, then all
    four); other counts are ordered by subset size, then by bit string.
    """
    if n == 4:
        return [ModalityMask(tuple(ch == "1" for ch in key)) for key in TABLE_ORDER_4]
    masks = [ModalityMask(tuple(bool(b >> i & 1) for i in range(n))) for b in range(1, 2 ** n)]
    return sorted(masks, key=lambda m: (len(m), m.key))


@dataclass
class HemisConfig:
    n_modalities: int = 4
    f1: int = 48
    f2: int = 48
    f3: int = 16
    kernel_size: int = 5
    n_classes: int = 4
    modality_names: tuple = MODALITY_NAMES

    def __post_init__(self):
        self.modality_names = tuple(self.modality_names)
        if len(self.modality_names) != self.n_modalities:
            raise ValueError("need one modality name per modality")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def param_shapes(self) -> dict:
        k = self.kernel_size
        shapes = {}
        for m in range(self.n_modalities):
            shapes[f"C1_{m}.kernels"] = (self.f1, 1, k, k)
            shapes[f"C1_{m}.bias"] = (self.f1,)
            shapes[f"C2_{m}.kernels"] = (self.f2, self.f1, k, k)
            shapes[f"C2_{m}.bias"] = (self.f2,)
        shapes["C3.kernels"] = (self.f3, 2 * self.f2, k, k)
        shapes["C3.bias"] = (self.f3,)
        shapes["C4.kernels"] = (self.n_classes, self.f3, k, k)
        shapes["C4.bias"] = (self.n_classes,)
        return shapes


@dataclass
class HemisParams:
    config: HemisConfig
    tensors: dict = field(default_factory=dict)

    def layer(self, name: str) -> ConvLayer:
        return ConvLayer(self.tensors[f"{name}.kernels"], self.tensors[f"{name}.bias"])

    def copy(self) -> "HemisParams":
        return HemisParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "HemisParams":
        return HemisParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(config: HemisConfig, rng: np.random.Generator, dtype=np.float32) -> HemisParams:
    """He-normal kernels (std ``sqrt(2 / fan_in)``), zero biases."""
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return HemisParams(config, tensors)


@dataclass
class FusionMoments:
    mean: np.ndarray
    var: np.ndarray


def _modality_images(images, mask: ModalityMask) -> dict:
    """Map available modality index -> (B, 1, H, W) array."""
    out = {}
    if isinstance(images, np.ndarray):
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1] != mask.n:
            raise ValueError(f"expected (N,H,W) or (B,N,H,W) images with N={mask.n}, got {images.shape}")
        for k in mask.indices:
            out[k] = images[:, k:k + 1]
    else:
        if len(images) != mask.n:
            raise ValueError(f"expected {mask.n} per-modality images, got {len(images)}")
        for k in mask.indices:
            img = images[k]
            if img is None:
                raise ValueError(f"modality {k} is marked available but has no image")
            img = np.asarray(img)
            if img.ndim == 2:
                img = img[None]
            out[k] = img[None] if img.ndim == 3 else img
    shapes = {(v.shape[0],) + v.shape[-2:] for v in out.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent image sizes across modalities: {sorted(shapes)}")
    return out


def backend_forward(images, mask: ModalityMask, params: HemisParams, return_caches: bool = False):
    """Per-modality feature stacks ``{k: (B, F2, H, W)}`` for the available k only."""
    if len(mask.available) != params.config.n_modalities:
        raise ValueError("mask length does not match the number of modalities")
    dtype = next(iter(params.tensors.values())).dtype
    stacks, caches = {}, {}
    for k, x in _modality_images(images, mask).items():
        x = x.astype(dtype, copy=False)
        h1, c1 = layers.conv2d_forward(x, params.layer(f"C1_{k}"))
        a1, r1 = layers.relu_forward(h1)
        h2, c2 = layers.conv2d_forward(a1, params.layer(f"C2_{k}"))
        a2, r2 = layers.relu_forward(h2)
        out, p2 = layers.maxpool2d_s1_forward(a2)
        stacks[k] = out
        caches[k] = (c1, r1, c2, r2, p2)
    return (stacks, caches) if return_caches else stacks


def _ordered(stacks):
    if isinstance(stacks, dict):
        return [stacks[k] for k in sorted(stacks)]
    return list(stacks)


def fuse(stacks) -> FusionMoments:
    """Mean and unbiased variance across modality stacks.

    ``stacks`` is a dict keyed by modality index (summed in ascending index
    order, so the result depends only on the set) or a list taken in order.
    Variance is exactly zero for a single stack.
    """
    items = _ordered(stacks)
    if not items:
        raise ValueError("fuse needs at least one stack")
    if len({s.shape for s in items}) != 1:
        raise ValueError("all stacks must have the same shape")
    n = len(items)
    total = items[0].copy()
    for s in items[1:]:
        total += s
    mean = total / n
    if n == 1:
        return FusionMoments(mean, np.zeros_like(mean))
    sq = (items[0] - mean) ** 2
    for s in items[1:]:
        sq += (s - mean) ** 2
    return FusionMoments(mean, sq / (n - 1))


def fuse_backward(grad_mean, grad_var, stacks):
    """Gradients w.r.t. each stack, keyed/ordered like ``stacks``.

    The mean's own dependence drops out of the variance derivative because
    the centred terms sum to zero, leaving ``2 (s_k - mean) / (|K| - 1)``.
    """
    keys = sorted(stacks) if isinstance(stacks, dict) else list(range(len(stacks)))
    items = _ordered(stacks)
    n = len(items)
    if grad_mean.shape != items[0].shape:
        raise ValueError("gradient shape does not match the fused stacks")
    base = grad_mean / n
    if n == 1:
        grads = [base.copy()]
    else:
        mean = fuse(items).mean
        grads = [base + grad_var * (2.0 * (s - mean) / (n - 1)) for s in items]
    if isinstance(stacks, dict):
        return dict(zip(keys, grads))
    return grads


def frontend_forward(moments: FusionMoments, params: HemisParams, return_caches: bool = False):
    """Posteriors ``softmax(C4(relu(C3([mean, var]))))`` over the class axis."""
    x = np.concatenate([moments.mean, moments.var], axis=-3)
    h3, c3 = layers.conv2d_forward(x, params.layer("C3"))
    a3, r3 = layers.relu_forward(h3)
    logits, c4 = layers.conv2d_forward(a3, params.layer("C4"))
    probs = layers.pixel_softmax(logits)
    if return_caches:
        return probs, (c3, r3, c4)
    return probs


@dataclass
class ModelTape:
    mask: ModalityMask
    stacks: dict
    backend_caches: dict
    frontend_caches: tuple
    f2: int


def _is_unbatched(images) -> bool:
    if isinstance(images, np.ndarray):
        return images.ndim == 3
    return all(img is None or np.ndim(img) <= 3 for img in images)


def model_forward(images, mask: ModalityMask, params: HemisParams, return_tape: bool = False):
    """Posteriors for the available modalities in ``mask``.

    ``(N, H, W)`` input (or a list of per-modality images) gives ``(L, H, W)``
    posteriors; ``(B, N, H, W)`` gives ``(B, L, H, W)``.
    """
    stacks, bcaches = backend_forward(images, mask, params, return_caches=True)
    moments = fuse(stacks)
    probs, fcaches = frontend_forward(moments, params, return_caches=True)
    if _is_unbatched(images):
        probs = probs[0]
    if return_tape:
        return probs, ModelTape(mask, stacks, bcaches, fcaches, params.config.f2)
    return probs


def model_backward(grad_logits, tape: ModelTape, params: HemisParams, only: Sequence[str] | None = None) -> dict:
    """Gradients for every parameter given the gradient at the logits.

    Back-end weights of absent modalities get exact zeros. ``only`` restricts
    the computation to parameters whose layer prefix is listed (e.g.
    ``("C4",)``), skipping the rest of the backward pass.
    """
    if tape is None:
        raise ValueError("model_backward requires the tape from a matching forward")
    if grad_logits.ndim == 3:
        grad_logits = grad_logits[None]
    wanted = (lambda name: True) if only is None else (lambda name: name.split(".")[0] in only)
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items() if wanted(name)}
    c3, r3, c4 = tape.frontend_caches
    g, gk, gb = layers.conv2d_backward(grad_logits, c4)
    if "C4.kernels" in grads:
        grads["C4.kernels"], grads["C4.bias"] = gk, gb
    if only is not None and set(only) <= {"C4"}:
        return grads
    g = layers.relu_backward(g, r3)
    g, gk, gb = layers.conv2d_backward(g, c3)
    if "C3.kernels" in grads:
        grads["C3.kernels"], grads["C3.bias"] = gk, gb
    f2 = tape.f2
    g_mean, g_var = g[..., :f2, :, :], g[..., f2:, :, :]
    g_stacks = fuse_backward(g_mean, g_var, tape.stacks)
    for k, gs in g_stacks.items():
        c1, r1, c2, r2, p2 = tape.backend_caches[k]
        gs = layers.maxpool2d_s1_backward(gs, p2)
        gs = layers.relu_backward(gs, r2)
        gs, gk2, gb2 = layers.conv2d_backward(gs, c2)
        gs = layers.relu_backward(gs, r1)
        _, gk1, gb1 = layers.conv2d_backward(gs, c1)
        for name, val in ((f"C1_{k}.kernels", gk1), (f"C1_{k}.bias", gb1),
                          (f"C2_{k}.kernels", gk2), (f"C2_{k}.bias", gb2)):
            if name in grads:
                grads[name] = val
    return grads


def predict_segmentation(posteriors) -> np.ndarray:
    """Pixelwise argmax over the class axis; ties go to the lowest class."""
    return np.argmax(np.asarray(posteriors), axis=-3)


def segment(images, mask: ModalityMask, params: HemisParams) -> np.ndarray:
    return predict_segmentation(model_forward(images, mask, params))


# --- HMZ1 container --------------------------------------------------------

def model_bytes(params: HemisParams) -> bytes:
    cfg = asdict(params.config)
    cfg["modality_names"] = list(cfg["modality_names"])
    header = json.dumps({"format_version": HMZ_VERSION, "config": cfg,
                         "modality_names": cfg["modality_names"]}, sort_keys=True).encode("utf-8")
    out = [HMZ_MAGIC, struct.pack("<I", len(header)), header]
    for name in params.config.param_shapes():
        raw = name.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, htf_bytes(params.tensors[name])]
    return b"".join(out)


def save_model(params: HemisParams, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(params))


def _read(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated model file while reading {what}")
    return buf


def load_model(path: str | os.PathLike) -> HemisParams:
    with open(path, "rb") as fh:
        stream = io.BytesIO(fh.read())
    magic = stream.read(4)
    if len(magic) < 4:
        raise TruncatedFileError("truncated model file while reading magic")
    if magic != HMZ_MAGIC:
        raise BadMagicError(f"bad model magic {magic!r}")
    (hlen,) = struct.unpack("<I", _read(stream, 4, "header length"))
    try:
        header = json.loads(_read(stream, hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed model header: {exc}") from exc
    if header.get("format_version") != HMZ_VERSION:
        raise VersionError(f"unsupported model format version {header.get('format_version')}")
    config = HemisConfig(**header["config"])
    tensors = {}
    while True:
        raw = stream.read(4)
        if not raw:
            break
        if len(raw) < 4:
            raise TruncatedFileError("truncated model file while reading record name length")
        (nlen,) = struct.unpack("<I", raw)
        name = _read(stream, nlen, "record name").decode("utf-8")
        tensors[name] = read_htf(stream)
    shapes = config.param_shapes()
    missing = [n for n in shapes if n not in tensors]
    if missing:
        raise MissingEntryError(f"model file lacks tensors {missing}")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return HemisParams(config, {n: tensors[n] for n in shapes})
