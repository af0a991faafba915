"""Deep SHAP attribution: DeepLIFT multiplier propagation against each
background reference, averaged over the background set.

In inference mode every layer of the density network is either affine
(conv, dense, batch norm on running stats), the identity (dropout), or an
elementwise ReLU. Multipliers propagate output-to-input through the affine
layers exactly as gradients do; ReLU uses the rescale rule

    m = (relu(x) - relu(x_ref)) / (x - x_ref)    when |x - x_ref| > delta,

falling back to the local gradient below ``delta``. The per-pixel
attribution against one reference is multiplier * (x - x_ref), which makes
the per-reference completeness identity

    sum(attributions) = f(x) - f(ref)

hold to numerical precision; averaging over references preserves it against
the mean background prediction. Attributions explain the raw linear output,
not the [0, 1]-clamped prediction: the clamp has zero gradient wherever it
saturates and would silently erase honest attributions.
"""

from __future__ import annotations

import binascii
import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ShapeError
from .nn.layers import BatchNorm2d, Conv2d, Dense, Dropout, Flatten, ReLU, conv2d_input_grad
from .preprocess import Dataset

RESCALE_DELTA = 1e-7

# tolerance of the completeness identity in single precision
COMPLETENESS_RTOL = 1e-3
COMPLETENESS_ATOL = 1e-5


@dataclass
class BackgroundSet:
    """Reference slices that stand for "feature absent" (training split only)."""

    slices: np.ndarray  # (count, ...) stacked reference inputs
    seed: int

    def __post_init__(self):
        if self.slices.shape[0] < 1:
            raise ValueError("background set needs at least one slice")
        self._record_cache: dict[int, list[np.ndarray]] = {}

    @property
    def count(self) -> int:
        return int(self.slices.shape[0])

    @property
    def ident(self) -> int:
        return binascii.crc32(np.ascontiguousarray(self.slices).tobytes())


@dataclass
class ShapMap:
    """Per-pixel attribution for one input slice.

    ``values`` sums to f(x) - E_b[f(b)] within the completeness tolerance;
    that identity is checked on construction.
    """

    values: np.ndarray
    input_id: int
    background_id: int
    model_checksum: int
    prediction: float
    background_mean: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution map contains non-finite values")
        gap = self.prediction - self.background_mean
        err = abs(float(self.values.sum()) - gap)
        if err > COMPLETENESS_RTOL * abs(gap) + COMPLETENESS_ATOL:
            raise ValueError(
                f"completeness violated: sum {self.values.sum():.6g} vs "
                f"f(x) - E[f(b)] = {gap:.6g}")


def sample_background(train_set: Dataset, count: int = 100, seed: int = 0) -> BackgroundSet:
    """Uniform sample of training slices, without replacement, seeded."""
    if train_set.split_tag != "train":
        raise ValueError(
            f"background must come from the training split, got '{train_set.split_tag}'")
    if count > len(train_set):
        raise ValueError(f"cannot sample {count} slices from {len(train_set)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(train_set), size=count, replace=False)
    images = np.stack([train_set.slices[i].image for i in sorted(picks)])
    return BackgroundSet(slices=images[:, None, :, :].astype(np.float32), seed=seed)


def _layers_of(model):
    layers = model.layers if hasattr(model, "layers") else list(model)
    if getattr(model, "training", False):
        raise ValueError("attribution requires inference mode; call eval_mode() first")
    return layers


def _record_forward(layers, batch: np.ndarray):
    """Inference forward pass, keeping each layer's input. Returns
    (per-layer inputs, final output)."""
    inputs = []
    h = batch
    for layer in layers:
        inputs.append(h)
        h = layer.infer(h)
    return inputs, h


def _propagate_multipliers(layers, inputs_x, inputs_ref, mult, delta):
    """Walk the layers backwards, turning output multipliers into input
    multipliers. ``inputs_x`` entries broadcast against ``inputs_ref``."""
    for layer, x_in, ref_in in zip(reversed(layers), reversed(inputs_x),
                                   reversed(inputs_ref)):
        if isinstance(layer, Dense):
            mult = mult @ layer.weight.T
        elif isinstance(layer, Conv2d):
            mult = conv2d_input_grad(mult, layer.weight, layer.stride, ref_in.shape[2:])
        elif isinstance(layer, BatchNorm2d):
            scale = layer._affine()[0]
            mult = mult * scale.reshape(1, -1, 1, 1)
        elif isinstance(layer, ReLU):
            gap = x_in - ref_in
            big = np.abs(gap) > delta
            safe = np.where(big, gap, np.asarray(1.0, dtype=gap.dtype))
            rescale = (np.maximum(x_in, 0) - np.maximum(ref_in, 0)) / safe
            local = (x_in > 0).astype(gap.dtype)
            mult = mult * np.where(big, rescale, local)
        elif isinstance(layer, Dropout):
            pass  # identity at inference
        elif isinstance(layer, Flatten):
            mult = mult.reshape(ref_in.shape)
        else:
            raise TypeError(f"no multiplier rule registered for {type(layer).__name__}")
    return mult


def deeplift_attributions(model, x: np.ndarray, references: np.ndarray,
                          delta: float = RESCALE_DELTA,
                          background: "BackgroundSet | None" = None):
    """Per-reference attributions for one input.

    x: a single input without batch axis; references: (R, ...) stacked.
    Returns (attributions (R, ...), f(x) scalar, f(ref) per reference).
    Reference activations are cached on ``background`` when given.
    """
    layers = _layers_of(model)
    x = np.asarray(x)
    references = np.asarray(references)
    if references.shape[1:] != x.shape:
        raise ShapeError(
            f"references {references.shape} do not stack over input {x.shape}")
    inputs_x, out_x = _record_forward(layers, x[None])
    if background is not None:
        key = getattr(model, "checksum", lambda: 0)()
        if key not in background._record_cache:
            background._record_cache.clear()
            background._record_cache[key] = _record_forward(layers, references)
        inputs_ref, out_ref = background._record_cache[key]
    else:
        inputs_ref, out_ref = _record_forward(layers, references)
    if out_x.ndim != 2 or out_x.shape[1] != 1:
        raise ShapeError(f"attribution expects a single output node, got {out_x.shape}")
    mult = np.ones((references.shape[0], 1), dtype=out_x.dtype)
    mult = _propagate_multipliers(layers, inputs_x, inputs_ref, mult, delta)
    attributions = mult * (x[None] - references)
    return attributions, float(out_x[0, 0]), out_ref[:, 0].astype(np.float64)


def deeplift_multipliers(model, x: np.ndarray, reference: np.ndarray,
                         delta: float = RESCALE_DELTA) -> np.ndarray:
    """Attribution of ``x`` against a single reference."""
    att, _, _ = deeplift_attributions(model, x, np.asarray(reference)[None], delta)
    return att[0]


def deep_shap(model, x: np.ndarray, background: BackgroundSet,
              input_id: int = 0, delta: float = RESCALE_DELTA) -> ShapMap:
    """Mean DeepLIFT attribution over the background set, as a ShapMap.

    For image inputs of shape (1, H, W) or (H, W) the map is (H, W).
    """
    x = np.asarray(x)
    squeeze = x.ndim == 2
    inp = x[None] if squeeze else x
    refs = background.slices
    att, fx, f_ref = deeplift_attributions(model, inp, refs, delta, background=background)
    values = att.mean(axis=0)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    return ShapMap(
        values=values,
        input_id=input_id,
        background_id=background.ident,
        model_checksum=getattr(model, "checksum", lambda: 0)(),
        prediction=fx,
        background_mean=float(f_ref.mean()),
    )


def exact_shapley_oracle(model, x: np.ndarray, references: np.ndarray,
                         max_features: int = 12) -> np.ndarray:
    """Exact Shapley values by full subset enumeration.

    "Feature absent" means the feature takes its reference value; the
    coalition payoff is the model output on the composite input. Values are
    averaged over references. O(2^n): refuses more than ``max_features``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if n > max_features or n > 12:
        raise ValueError(f"{n} features exceeds the enumeration limit")
    layers = _layers_of(model)
    if isinstance(references, BackgroundSet):
        references = references.slices
    references = np.asarray(references, dtype=np.float64).reshape(-1, n)

    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                        for s in range(n)])
    masks = np.arange(1 << n)
    bits = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    sizes = bits.sum(axis=1)

    values = np.zeros(n)
    for ref in references:
        composites = np.where(bits, x[None, :], ref[None, :])
        _, out = _record_forward(layers, composites)
        payoff = out[:, 0]
        for i in range(n):
            without = ~bits[:, i]
            gain = payoff[masks[without] | (1 << i)] - payoff[masks[without]]
            values[i] += float((weights[sizes[without]] * gain).sum())
    return values / references.shape[0]


# ---------------------------------------------------------------------------
# Serialization: a raw float32 grid with a fixed header, a CSV triplet dump,
# and a PPM overlay for eyeballing. Layouts in the README.
# ---------------------------------------------------------------------------

_GRID_MAGIC = b"DSHG"
_GRID_VERSION = 1


def save_shapmap(shapmap: ShapMap, path) -> Path:
    path = Path(path)
    h, w = shapmap.values.shape
    header = _GRID_MAGIC + struct.pack(
        "<IIIqIIdd", _GRID_VERSION, h, w, shapmap.input_id,
        shapmap.background_id & 0xFFFFFFFF, shapmap.model_checksum & 0xFFFFFFFF,
        shapmap.prediction, shapmap.background_mean)
    path.write_bytes(header + shapmap.values.astype("<f4").tobytes())
    return path


def load_shapmap(path) -> ShapMap:
    raw = Path(path).read_bytes()
    if raw[:4] != _GRID_MAGIC:
        raise ValueError(f"{path} is not an attribution grid file")
    version, h, w, input_id, bg_id, checksum, fx, ef = struct.unpack_from(
        "<IIIqIIdd", raw, 4)
    if version != _GRID_VERSION:
        raise ValueError(f"{path}: grid version {version} unsupported")
    offset = 4 + struct.calcsize("<IIIqIIdd")
    values = np.frombuffer(raw, dtype="<f4", count=h * w, offset=offset).reshape(h, w)
    return ShapMap(values=values.copy(), input_id=input_id, background_id=bg_id,
                   model_checksum=checksum, prediction=fx, background_mean=ef)


def shapmap_to_csv(shapmap: ShapMap, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r in range(shapmap.values.shape[0]):
            for c in range(shapmap.values.shape[1]):
                writer.writerow([r, c, format(float(shapmap.values[r, c]), ".9g")])
    return path


def export_shap_overlay(slice_image: np.ndarray, shapmap: ShapMap, path) -> Path:
    """Diverging overlay (red positive, blue negative) at 50% opacity over
    the grayscale slice, written as binary PPM. Deterministic bytes.

    The color scale is symmetric at the 99th percentile of |values|.
    """
    values = shapmap.values
    if slice_image.shape != values.shape:
        raise ShapeError(
            f"slice {slice_image.shape} and map {values.shape} sizes differ")
    if not np.all(np.isfinite(values)):
        raise ValueError("attribution map contains non-finite values")
    vmax = float(np.percentile(np.abs(values), 99.0))
    t = np.clip(values / vmax, -1.0, 1.0) if vmax > 0 else np.zeros_like(values)
    red = np.where(t >= 0, 1.0, 1.0 + t)
    green = 1.0 - np.abs(t)
    blue = np.where(t <= 0, 1.0, 1.0 - t)
    overlay = np.stack([red, green, blue], axis=-1)
    lo, hi = float(slice_image.min()), float(slice_image.max())
    gray = (slice_image - lo) / (hi - lo) if hi > lo else np.zeros_like(slice_image)
    composite = 0.5 * overlay + 0.5 * gray[:, :, None]
    pixels = np.round(composite * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{values.shape[1]} {values.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
    return path


__all__ = [
    "BackgroundSet",
    "COMPLETENESS_ATOL",
    "COMPLETENESS_RTOL",
    "RESCALE_DELTA",
    "ShapMap",
    "deep_shap",
    "deeplift_attributions",
    "deeplift_multipliers",
    "exact_shapley_oracle",
    "export_shap_overlay",
    "load_shapmap",
    "sample_background",
    "save_shapmap",
    "shapmap_to_csv",
]
