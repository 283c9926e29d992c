"""Multi-scale location encoding, attention fusion and the diversity metric.

The location code follows the Space2Vec "theory" grid cell: project the
planar position onto three unit directions 120 degrees apart and take
sin/cos at S geometrically spaced wavelengths. The fused embedding is
``z = a * [r, e]`` with ``a = sigmoid(W [r, e] + b)`` (a per-pixel 1x1
convolution) where ``e`` is the model's embedding tap.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from densal.model import (
    TrainedModel,
    as_array,
    embed_pixels,
    loss_terms,
    sigmoid,
)

log = logging.getLogger(__name__)


class EmbeddingError(ValueError):
    pass


DIRECTIONS = np.array(
    [[np.cos(a), np.sin(a)] for a in np.deg2rad([0.0, 120.0, 240.0])]
)


@dataclass(frozen=True)
class LocationEncoderSpec:
    scales: int = 16
    lambda_min: float = 100.0
    lambda_max: float = 1_000_000.0

    def __post_init__(self):
        if self.scales < 2:
            raise EmbeddingError("need at least 2 scales")
        if not 0 < self.lambda_min < self.lambda_max:
            raise EmbeddingError("require 0 < lambda_min < lambda_max")

    @property
    def dim(self) -> int:
        return 6 * self.scales

    def wavelengths(self) -> np.ndarray:
        return np.geomspace(self.lambda_min, self.lambda_max, self.scales)


def encode_location(p, spec: LocationEncoderSpec = LocationEncoderSpec()) -> np.ndarray:
    """Encode planar points (..., 2) into (..., 6*S).

    Layout: for scale s, direction j the pair (sin, cos) sits at
    ``2 * (3 * s + j)``.
    """
    p = np.asarray(p, dtype=np.float64)
    proj = p @ DIRECTIONS.T  # (..., 3)
    phase = proj[..., None, :] / spec.wavelengths()[:, None]  # (..., S, 3)
    out = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
    return out.reshape(*p.shape[:-1], spec.dim)


@dataclass
class Attention:
    """1x1 convolution + sigmoid over the concatenated channels [r, e]."""

    W: np.ndarray
    b: np.ndarray
    encoder: LocationEncoderSpec = LocationEncoderSpec()

    @classmethod
    def zeros(cls, dim: int, encoder: LocationEncoderSpec = LocationEncoderSpec()):
        return cls(np.zeros((dim, dim)), np.zeros(dim), encoder)

    @property
    def dim(self) -> int:
        return len(self.b)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def header(self) -> dict:
        e = self.encoder
        return {"scales": e.scales, "lambda_min": e.lambda_min, "lambda_max": e.lambda_max}

    @classmethod
    def from_saved(cls, header, arrays):
        return cls(arrays["W"], arrays["b"], LocationEncoderSpec(**header))


def fuse(r, e, attention: Attention | None = None) -> np.ndarray:
    """z = a * [r, e]; with no attention given, W = 0 and b = 0 (a = 1/2)."""
    r = np.asarray(r, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if r.shape[:-1] != e.shape[:-1]:
        raise EmbeddingError(f"r {r.shape} and e {e.shape} disagree on leading dims")
    x = np.concatenate([r, e], axis=-1)
    if not np.all(np.isfinite(x)):
        raise EmbeddingError("non-finite input to fuse")
    if attention is None:
        return 0.5 * x
    if attention.dim != x.shape[-1]:
        raise EmbeddingError(f"attention expects dim {attention.dim}, got {x.shape[-1]}")
    a = sigmoid(x @ attention.W.T + attention.b)
    return a * x


def distance(zi, zj) -> np.ndarray:
    """Squared Euclidean distance along the last axis."""
    d = np.asarray(zi, dtype=np.float64) - np.asarray(zj, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def pixel_coordinates(grid) -> np.ndarray:
    """Planar centre of every pixel of a RasterGrid, shaped (h, w, 2)."""
    rows, cols = np.mgrid[0:grid.height, 0:grid.width]
    x, y = grid.geotransform.pixel_center(rows, cols)
    return np.stack([x, y], axis=-1)


def embed_fused(model: TrainedModel, grid) -> np.ndarray:
    """Per-pixel fused embedding z for one model, shaped (h, w, 6S + width)."""
    att = model.attention
    enc = att.encoder if att is not None else LocationEncoderSpec()
    r = encode_location(pixel_coordinates(grid), enc)
    e = embed_pixels(model, grid)
    return fuse(r, e, att)


def ensemble_embedding(models, grid) -> np.ndarray:
    """Mean of the members' fused embeddings per pixel."""
    zs = [embed_fused(m, grid) for m in models]
    return np.mean(zs, axis=0)


# ---------------------------------------------------------------------------
# training the attention on the labelled set


def _attention_grads(W, b, u, X, target):
    """Two-head loss through z = sigmoid(XW^T + b) * X and linear readouts.

    ``u`` holds the auxiliary head parameters: [w_den, b_den, w_cls, b_cls].
    """
    n, d = X.shape
    pre = X @ W.T + b
    a = sigmoid(pre)
    z = a * X
    w_den, b_den, w_cls, b_cls = u
    y = z @ w_den + b_den
    logit = z @ w_cls + b_cls
    mse, ce = loss_terms(y, logit, target)
    dy = 2.0 * (y - target) / n
    dl = (sigmoid(logit) - (target > 0)) / n
    dz = np.outer(dy, w_den) + np.outer(dl, w_cls)
    dpre = dz * X * a * (1.0 - a)
    gW = dpre.T @ X
    gb = dpre.sum(axis=0)
    gu = [z.T @ dy, dy.sum(), z.T @ dl, dl.sum()]
    return mse + ce, gW, gb, gu


def train_attention(model: TrainedModel, dataset, encoder: LocationEncoderSpec = LocationEncoderSpec(),
                    epochs: int = 20, learning_rate: float = 1e-2, batch_pixels: int = 4096,
                    seed: int = 0) -> Attention:
    """Fit the attention weights on labelled grids with the two-head loss.

    ``dataset`` yields (image RasterGrid, density labels, valid mask or None).
    The embedding tap is frozen; only W, b and an auxiliary linear readout
    from z are trained.
    """
    feats, labels = [], []
    for image, density, valid in dataset:
        r = encode_location(pixel_coordinates(image), encoder)
        e = embed_pixels(model, image)
        x = np.concatenate([r, e], axis=-1).reshape(-1, encoder.dim + model.spec.embed_width)
        t = as_array(density)[0].ravel()
        if valid is not None:
            keep = np.asarray(valid, dtype=bool).ravel()
            x, t = x[keep], t[keep]
        feats.append(x)
        labels.append(t)
    if not feats:
        raise EmbeddingError("empty attention training set")
    X = np.concatenate(feats)
    t = np.concatenate(labels)
    d = X.shape[1]
    rng = np.random.default_rng(seed)
    W = np.zeros((d, d))
    b = np.zeros(d)
    u = [np.zeros(d), 0.0, np.zeros(d), 0.0]
    # plain Adam over (W, b, u)
    theta = [W, b, *u]
    m = [np.zeros_like(np.asarray(p, dtype=float)) for p in theta]
    v = [np.zeros_like(np.asarray(p, dtype=float)) for p in theta]
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(t))
        for start in range(0, len(t), batch_pixels):
            idx = order[start:start + batch_pixels]
            loss, gW, gb, gu = _attention_grads(theta[0], theta[1], theta[2:], X[idx], t[idx])
            if not np.isfinite(loss):
                raise EmbeddingError("non-finite loss while training attention")
            step += 1
            for i, g in enumerate([gW, gb, *gu]):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                upd = learning_rate * (m[i] / (1 - 0.9**step)) / (np.sqrt(v[i] / (1 - 0.999**step)) + 1e-8)
                theta[i] = theta[i] - upd
    return Attention(theta[0], theta[1], encoder)


# ---------------------------------------------------------------------------
# PEMB: per-region embeddings, repeated records of
#   u64 region id, 2 x f64 coords, u32 dim, dim x f32


def write_pemb(path, records) -> None:
    """``records`` yields (region_id, (x, y), vector)."""
    buf = io.BytesIO()
    for rid, (x, y), vec in records:
        vec = np.asarray(vec, dtype="<f4").ravel()
        buf.write(struct.pack("<Q2dI", int(rid), float(x), float(y), len(vec)))
        buf.write(vec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_pemb(path) -> list[tuple[int, tuple[float, float], np.ndarray]]:
    data = Path(path).read_bytes()
    out = []
    off = 0
    rec = struct.calcsize("<Q2dI")
    while off < len(data):
        if off + rec > len(data):
            raise EmbeddingError(f"{path}: truncated record header at byte {off}")
        rid, x, y, dim = struct.unpack_from("<Q2dI", data, off)
        off += rec
        if off + 4 * dim > len(data):
            raise EmbeddingError(f"{path}: truncated payload for region {rid}")
        vec = np.frombuffer(data, "<f4", dim, off).astype(np.float64)
        off += 4 * dim
        out.append((rid, (x, y), vec))
    return out
