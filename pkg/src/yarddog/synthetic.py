"""Synthetic identity clusters for tests, demos and the acceptance benchmark."""
from __future__ import annotations

import numpy as np

from .dataset import FeatureDataset
from .nn_core import LayerGraph, layer_from_dict


def clustered_features(
    n_identities: int = 40,
    images_per_identity: int = 12,
    dim: int = 32,
    separation: float = 6.0,
    sigma: float = 1.0,
    latent_dim: int | None = 8,
    seed: int = 0,
) -> FeatureDataset:
    """Gaussian identity clusters with isotropic within-identity noise ``sigma``.

    Identity means live in a random ``latent_dim``-dimensional subspace
    (the whole space if ``None``) and are rescaled so that the smallest
    distance between two means is exactly ``separation * sigma``.
    """
    rng = np.random.default_rng(seed)
    latent = dim if latent_dim is None else min(latent_dim, dim)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, latent)))
    centers = rng.standard_normal((n_identities, latent)) @ basis.T
    diff = centers[:, None, :] - centers[None, :, :]
    gaps = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(gaps, np.inf)
    centers *= separation * sigma / gaps.min()
    offset = 10.0 * separation * sigma * rng.standard_normal(dim) / np.sqrt(dim)
    ids, imgs, rows = [], [], []
    for i in range(n_identities):
        noise = sigma * rng.standard_normal((images_per_identity, dim))
        for j in range(images_per_identity):
            ids.append(f"id{i:03d}")
            imgs.append(f"img{j:03d}")
        rows.append(centers[i] + offset + noise)
    return FeatureDataset(tuple(ids), tuple(imgs), np.vstack(rows))


def random_model(rng: np.random.Generator, input_shape=(6, 6, 2), n_blocks: int = 2,
                 dense_out: int | None = 4) -> LayerGraph:
    """Small random VGG-style graph: [conv, relu, (maxpool)] blocks, flatten, dense."""
    h, w, c = input_shape
    specs = []
    for _ in range(n_blocks):
        k = int(rng.integers(1, min(3, h, w) + 1))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        cout = int(rng.integers(1, 4))
        specs.append({
            "kind": "conv2d", "kernel": [k, k], "in_channels": c, "out_channels": cout,
            "stride": stride, "padding": pad,
            "weights": rng.standard_normal(cout * k * k * c).tolist(),
            "biases": rng.standard_normal(cout).tolist(),
        })
        h, w, c = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1, cout
        specs.append({"kind": "relu"})
        if h >= 2 and w >= 2 and rng.random() < 0.5:
            specs.append({"kind": "maxpool", "window": [2, 2], "stride": int(rng.integers(1, 3))})
            s = specs[-1]["stride"]
            h, w = (h - 2) // s + 1, (w - 2) // s + 1
    if dense_out:
        specs.append({"kind": "flatten"})
        din = h * w * c
        specs.append({
            "kind": "dense", "in_dim": din, "out_dim": dense_out,
            "weights": rng.standard_normal(dense_out * din).tolist(),
            "biases": rng.standard_normal(dense_out).tolist(),
        })
    return LayerGraph("random", tuple(input_shape), tuple(layer_from_dict(s, i) for i, s in enumerate(specs)))
