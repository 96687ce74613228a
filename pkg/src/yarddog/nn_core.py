"""Minimal feed-forward inference over a JSON layer graph.

Activations are float64 numpy arrays, either ``(h, w, c)`` feature maps or
1-D vectors.  Supported layer kinds: ``conv2d``, ``relu``, ``maxpool``,
``flatten`` and ``dense``.  Weight layouts in the model file are

* conv2d: ``(out_channels, kernel_h, kernel_w, in_channels)``, row-major
* dense:  ``(out_dim, in_dim)``, row-major
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModelFormatError, ModelShapeError

Shape = tuple[int, ...]


def _as_pair(value: Any, what: str) -> tuple[int, int]:
    if isinstance(value, int) and not isinstance(value, bool):
        return value, value
    if (
        isinstance(value, (list, tuple))
        and len(value) == 2
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        return int(value[0]), int(value[1])
    raise ModelFormatError(f"{what} must be an integer or a pair of integers, got {value!r}")


@dataclass(frozen=True, eq=False)
class Conv2D:
    kernel: tuple[int, int]
    in_channels: int
    out_channels: int
    stride: int
    padding: int
    weights: np.ndarray  # (out, kh, kw, in)
    biases: np.ndarray

    kind = "conv2d"

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ModelShapeError(f"conv2d needs an (h, w, c) input, got shape {shape}")
        h, w, c = shape
        if c != self.in_channels:
            raise ModelShapeError(f"conv2d expects {self.in_channels} input channels, got {c}")
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if h + 2 * self.padding < kh or w + 2 * self.padding < kw:
            raise ModelShapeError(f"conv2d kernel {self.kernel} larger than padded input {shape}")
        return ho, wo, self.out_channels

    def __call__(self, x: np.ndarray) -> np.ndarray:
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((p, p), (p, p), (0, 0)))
        kh, kw = self.kernel
        windows = sliding_window_view(x, (kh, kw), axis=(0, 1))[::s, ::s]
        # windows: (ho, wo, in, kh, kw)
        out = np.einsum("ijcab,oabc->ijo", windows, self.weights)
        return out + self.biases

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kernel": list(self.kernel),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stride": self.stride,
            "padding": self.padding,
            "weights": self.weights.ravel().tolist(),
            "biases": self.biases.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class MaxPool:
    window: tuple[int, int]
    stride: int

    kind = "maxpool"

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ModelShapeError(f"maxpool needs an (h, w, c) input, got shape {shape}")
        h, w, c = shape
        wh, ww = self.window
        if h < wh or w < ww:
            raise ModelShapeError(f"maxpool window {self.window} larger than input {shape}")
        return (h - wh) // self.stride + 1, (w - ww) // self.stride + 1, c

    def __call__(self, x: np.ndarray) -> np.ndarray:
        windows = sliding_window_view(x, self.window, axis=(0, 1))[:: self.stride, :: self.stride]
        return windows.max(axis=(3, 4))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "window": list(self.window), "stride": self.stride}


@dataclass(frozen=True, eq=False)
class Flatten:
    kind = "flatten"

    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(-1)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class Dense:
    in_dim: int
    out_dim: int
    weights: np.ndarray  # (out, in)
    biases: np.ndarray

    kind = "dense"

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 1:
            raise ModelShapeError(f"dense needs a vector input (insert a flatten), got shape {shape}")
        if shape[0] != self.in_dim:
            raise ModelShapeError(f"dense expects input dim {self.in_dim}, got {shape[0]}")
        return (self.out_dim,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.weights @ x + self.biases

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "weights": self.weights.ravel().tolist(),
            "biases": self.biases.tolist(),
        }


Layer = Union[Conv2D, ReLU, MaxPool, Flatten, Dense]


@dataclass(frozen=True, eq=False)
class LayerGraph:
    """Ordered, shape-checked list of layers.  Treat as immutable."""

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    shapes: tuple[Shape, ...] = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise ModelFormatError("model has no layers")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ModelFormatError(f"input shape must be three positive integers, got {self.input_shape}")
        shapes = []
        shape: Shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ModelShapeError as exc:
                raise ModelShapeError(str(exc), i) from None
            if any(s < 1 for s in shape):
                raise ModelShapeError(f"empty output shape {shape}", i)
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }


def _float_array(values: Any, what: str, index: int) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFormatError(f"layer {index}: {what} must be an array of numbers") from None
    if arr.ndim != 1:
        raise ModelFormatError(f"layer {index}: {what} must be a flat array")
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"layer {index}: {what} contains non-finite values")
    return arr


def _positive_int(spec: dict, key: str, index: int, default: int | None = None) -> int:
    value = spec.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ModelFormatError(f"layer {index}: {key} must be a positive integer, got {value!r}")
    return value


def layer_from_dict(spec: dict, index: int) -> Layer:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ModelFormatError(f"layer {index}: expected an object with a 'kind' field")
    kind = spec["kind"]
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "maxpool":
        try:
            window = _as_pair(spec.get("window"), "window")
        except ModelFormatError as exc:
            raise ModelFormatError(f"layer {index}: {exc}") from None
        if min(window) < 1:
            raise ModelFormatError(f"layer {index}: window must be positive")
        return MaxPool(window, _positive_int(spec, "stride", index))
    if kind == "conv2d":
        try:
            kernel = _as_pair(spec.get("kernel"), "kernel")
        except ModelFormatError as exc:
            raise ModelFormatError(f"layer {index}: {exc}") from None
        if min(kernel) < 1:
            raise ModelFormatError(f"layer {index}: kernel must be positive")
        cin = _positive_int(spec, "in_channels", index)
        cout = _positive_int(spec, "out_channels", index)
        stride = _positive_int(spec, "stride", index, 1)
        padding = spec.get("padding", 0)
        if not isinstance(padding, int) or isinstance(padding, bool) or padding < 0:
            raise ModelFormatError(f"layer {index}: padding must be a non-negative integer")
        weights = _float_array(spec.get("weights"), "weights", index)
        biases = _float_array(spec.get("biases"), "biases", index)
        expected = cout * kernel[0] * kernel[1] * cin
        if weights.size != expected:
            raise ModelShapeError(
                f"conv2d declares {cout}x{kernel[0]}x{kernel[1]}x{cin} = {expected} weights, "
                f"file has {weights.size}",
                index,
            )
        if biases.size != cout:
            raise ModelShapeError(f"conv2d declares {cout} biases, file has {biases.size}", index)
        return Conv2D(kernel, cin, cout, stride, padding, weights.reshape(cout, kernel[0], kernel[1], cin), biases)
    if kind == "dense":
        din = _positive_int(spec, "in_dim", index)
        dout = _positive_int(spec, "out_dim", index)
        weights = _float_array(spec.get("weights"), "weights", index)
        biases = _float_array(spec.get("biases"), "biases", index)
        if weights.size != dout * din:
            raise ModelShapeError(
                f"dense declares {dout}x{din} = {dout * din} weights, file has {weights.size}", index
            )
        if biases.size != dout:
            raise ModelShapeError(f"dense declares {dout} biases, file has {biases.size}", index)
        return Dense(din, dout, weights.reshape(dout, din), biases)
    raise ModelFormatError(f"layer {index}: unknown layer kind {kind!r}")


def model_from_dict(doc: Any) -> LayerGraph:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    for key in ("input", "layers"):
        if key not in doc:
            raise ModelFormatError(f"model document is missing {key!r}")
    inp = doc["input"]
    if (
        not isinstance(inp, list)
        or len(inp) != 3
        or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in inp)
    ):
        raise ModelFormatError(f"'input' must be [h, w, c] positive integers, got {inp!r}")
    specs = doc["layers"]
    if not isinstance(specs, list) or not specs:
        raise ModelFormatError("'layers' must be a non-empty list")
    layers = tuple(layer_from_dict(spec, i) for i, spec in enumerate(specs))
    return LayerGraph(str(doc.get("name", "")), tuple(inp), layers)


def load_model(path: str | Path) -> LayerGraph:
    """Read and shape-validate a JSON model file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def save_model(model: LayerGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()) + "\n", encoding="utf-8")


def truncate(model: LayerGraph, depth: int) -> LayerGraph:
    """Keep the first ``depth`` layers, flattening the output if it is not a vector.

    The input model is not modified.
    """
    n = len(model.layers)
    if isinstance(depth, bool) or not isinstance(depth, (int, np.integer)) or not 1 <= depth <= n:
        raise ValueError(f"truncation depth must be in [1, {n}], got {depth!r}")
    layers = model.layers[:depth]
    if len(model.shapes[depth - 1]) != 1:
        layers = layers + (Flatten(),)
    return LayerGraph(model.name, model.input_shape, layers)


def _check_input(model: LayerGraph, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ModelShapeError(f"input shape {x.shape} does not match model input {tuple(model.input_shape)}")
    return x


def forward_all(model: LayerGraph, x: np.ndarray) -> list[np.ndarray]:
    """Return the (unflattened) activation after every layer."""
    x = _check_input(model, x)
    out = []
    for layer in model.layers:
        x = layer(x)
        out.append(x)
    return out


def forward(model: LayerGraph, x: np.ndarray) -> np.ndarray:
    """Run ``x`` (shape ``(h, w, c)``) through the model; returns the flattened output."""
    x = _check_input(model, x)
    for layer in model.layers:
        x = layer(x)
    return np.ascontiguousarray(x).reshape(-1)


def extract_features(model: LayerGraph, depth: int, images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack ``forward(truncate(model, depth), image)`` for each image."""
    head = truncate(model, depth)
    return np.stack([forward(head, img) for img in images]) if len(images) else np.empty((0, 0))


# -- raw image archive ----------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    identity: str
    image: str
    tensor: np.ndarray


def load_images(path: str | Path) -> list[ImageRecord]:
    """Read a raw tensor archive.

    The archive is a JSON object ``{"images": [{"identity", "image",
    "shape": [h, w, c], "data": [...]}, ...]}`` with ``data`` in row-major
    ``(h, w, c)`` order.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    items = doc.get("images") if isinstance(doc, dict) else None
    if not isinstance(items, list):
        raise ModelFormatError(f"{path}: expected an object with an 'images' list")
    out = []
    for i, item in enumerate(items):
        try:
            shape = tuple(int(s) for s in item["shape"])
            data = np.asarray(item["data"], dtype=np.float64)
            ident, img = str(item["identity"]), str(item["image"])
        except (KeyError, TypeError, ValueError):
            raise ModelFormatError(f"{path}: image {i} is malformed") from None
        if len(shape) != 3 or min(shape) < 1 or data.ndim != 1 or data.size != int(np.prod(shape)):
            raise ModelFormatError(f"{path}: image {i} data length does not match shape {shape}")
        if not np.all(np.isfinite(data)):
            raise ModelFormatError(f"{path}: image {i} has non-finite values")
        out.append(ImageRecord(ident, img, data.reshape(shape)))
    return out


def save_images(records: Sequence[ImageRecord], path: str | Path) -> None:
    doc = {
        "images": [
            {
                "identity": r.identity,
                "image": r.image,
                "shape": list(r.tensor.shape),
                "data": np.asarray(r.tensor, dtype=np.float64).ravel().tolist(),
            }
            for r in records
        ]
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")
