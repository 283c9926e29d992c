"""Reference density regressor: per-pixel MLP over a small context window.

The network maps each pixel's band vector, concatenated with its neighbours in
a ``context x context`` window, through ReLU hidden layers to two heads: a
linear density head and a logistic class head (tree vs background). The
activations of the last hidden layer are the embedding tap used for the
diversity distance.

Everything is plain numpy with hand-written backprop so gradients can be
checked against finite differences.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    n_bands: int = 4
    hidden: tuple[int, ...] = (64, 64)
    context: int = 3
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 2:
            raise ModelError("need at least 2 hidden layers")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.hidden[-1] < 2:
            raise ModelError("embedding width must be >= 2")
        if self.context < 1 or self.context % 2 == 0:
            raise ModelError("context must be a positive odd window side")
        if self.n_bands < 1:
            raise ModelError("n_bands must be >= 1")

    @property
    def n_inputs(self) -> int:
        return self.n_bands * self.context**2

    @property
    def embed_width(self) -> int:
        return self.hidden[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    losses: list[float] = field(default_factory=list)
    seed: int = 0
    attention: "object | None" = None  # geoembed.Attention, set after training

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


@dataclass
class EnsemblePrediction:
    members: np.ndarray  # (T, h, w)
    mean: np.ndarray
    variance: np.ndarray

    @property
    def T(self) -> int:
        return self.members.shape[0]


# ---------------------------------------------------------------------------
# features and parameters


def as_array(patch) -> np.ndarray:
    """Accept a RasterGrid or a (bands, h, w) array."""
    vals = getattr(patch, "values", patch)
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 2:
        vals = vals[None]
    return vals


def pixel_features(values: np.ndarray, context: int) -> np.ndarray:
    """(bands, h, w) -> (h*w, bands*context**2) with edge padding."""
    b, h, w = values.shape
    k = context // 2
    padded = np.pad(values, ((0, 0), (k, k), (k, k)), mode="edge")
    cols = [
        padded[:, dr:dr + h, dc:dc + w]
        for dr in range(context)
        for dc in range(context)
    ]
    return np.stack(cols, axis=1).reshape(b * context**2, h * w).T


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal hidden layers; both output heads start at zero."""
    params = {}
    fan_in = spec.n_inputs
    for i, width in enumerate(spec.hidden):
        params[f"W{i}"] = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        params[f"b{i}"] = np.zeros(width)
        fan_in = width
    params["w_den"] = np.zeros(fan_in)
    params["b_den"] = np.zeros(1)
    params["w_cls"] = np.zeros(fan_in)
    params["b_cls"] = np.zeros(1)
    return params


def _softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# forward / backward


def forward(params, spec: ModelSpec, X, masks=None):
    """Run the network on standardized features ``X`` (n, d).

    ``masks`` is an optional list of inverted-dropout multipliers, one per
    hidden layer. Returns (density, class_logit, cache).
    """
    acts = [X]
    pre = []
    h = X
    for i in range(len(spec.hidden)):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        pre.append(z)
        acts.append(h)
    y = h @ params["w_den"] + params["b_den"][0]
    logit = h @ params["w_cls"] + params["b_cls"][0]
    return y, logit, (acts, pre, masks)


def loss_terms(y, logit, target):
    """Mean squared density error plus binary CE on [target > 0]."""
    cls = (target > 0).astype(np.float64)
    mse = np.mean((y - target) ** 2)
    ce = np.mean(_softplus(logit) - cls * logit)
    return mse, ce


def loss_and_grads(params, spec: ModelSpec, X, target, masks=None):
    y, logit, (acts, pre, masks) = forward(params, spec, X, masks)
    n = len(target)
    mse, ce = loss_terms(y, logit, target)
    cls = (target > 0).astype(np.float64)

    dy = 2.0 * (y - target) / n
    dlogit = (sigmoid(logit) - cls) / n
    h = acts[-1]
    grads = {
        "w_den": h.T @ dy,
        "b_den": np.array([dy.sum()]),
        "w_cls": h.T @ dlogit,
        "b_cls": np.array([dlogit.sum()]),
    }
    dh = np.outer(dy, params["w_den"]) + np.outer(dlogit, params["w_cls"])
    for i in reversed(range(len(spec.hidden))):
        if masks is not None:
            dh = dh * masks[i]
        dz = dh * (pre[i] > 0)
        grads[f"W{i}"] = acts[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ params[f"W{i}"].T
    return mse + ce, grads


def dropout_masks(spec: ModelSpec, n: int, rng: np.random.Generator):
    p = spec.dropout_rate
    if p == 0:
        return None
    return [(rng.random((n, w)) >= p) / (1.0 - p) for w in spec.hidden]


# ---------------------------------------------------------------------------
# training


@dataclass
class LabelledPatch:
    """Input bands (bands, h, w), density labels (h, w), optional valid mask."""

    image: np.ndarray
    density: np.ndarray
    valid: np.ndarray | None = None


def _stack_dataset(dataset, spec: ModelSpec):
    feats, labels = [], []
    for item in dataset:
        img = as_array(item.image)
        if img.shape[0] != spec.n_bands:
            raise ModelError(f"patch has {img.shape[0]} bands, spec expects {spec.n_bands}")
        lab = np.asarray(getattr(item.density, "values", item.density), dtype=np.float64)
        lab = lab.reshape(img.shape[1:])
        f = pixel_features(img, spec.context)
        lab = lab.ravel()
        if item.valid is not None:
            keep = np.asarray(item.valid, dtype=bool).ravel()
            f, lab = f[keep], lab[keep]
        feats.append(f)
        labels.append(lab)
    if not feats:
        raise ModelError("empty dataset")
    X = np.concatenate(feats)
    t = np.concatenate(labels)
    if len(t) == 0:
        raise ModelError("dataset contains no valid pixels")
    if not np.all(np.isfinite(t)) or (t < 0).any():
        raise ModelError("labels must be finite and >= 0")
    return X, t


def train(dataset, spec: ModelSpec, cfg: TrainConfig) -> TrainedModel:
    """Fit the two-head loss with Adam on all pixels of ``dataset``.

    ``batch_size`` counts patches; each step uses the pixels of that many
    patches' worth of data (batch_size * mean pixels per patch), drawn from a
    seeded permutation of all pixels.
    """
    dataset = list(dataset)
    X, t = _stack_dataset(dataset, spec)
    rng = np.random.default_rng(cfg.seed)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-8] = 1.0
    Xs = (X - mean) / std

    params = init_params(spec, rng)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    px_per_patch = max(1, len(t) // len(dataset))
    step_size = max(1, min(len(t), cfg.batch_size * px_per_patch))
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(t))
        total, count = 0.0, 0
        for start in range(0, len(t), step_size):
            idx = order[start:start + step_size]
            masks = dropout_masks(spec, len(idx), rng)
            loss, grads = loss_and_grads(params, spec, Xs[idx], t[idx], masks)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(p)) for k, p in params.items()}
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; param norms {norms}"
                )
            step += 1
            b1c = 1 - cfg.beta1**step
            b2c = 1 - cfg.beta2**step
            for k in params:
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * grads[k]
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * grads[k] ** 2
                params[k] -= cfg.learning_rate * (m[k] / b1c) / (np.sqrt(v[k] / b2c) + cfg.eps)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.debug("seed %d epoch %d loss %.5f", cfg.seed, epoch, losses[-1])
    return TrainedModel(spec, params, mean, std, losses, cfg.seed)


def train_ensemble(dataset, spec: ModelSpec, cfg: TrainConfig, T: int = 5,
                   seeds=None, threads: int = 1) -> list[TrainedModel]:
    """Train ``T`` members that differ only in their seed."""
    if T < 1:
        raise ModelError("ensemble size T must be >= 1")
    dataset = list(dataset)
    if seeds is None:
        seeds = [cfg.seed + 1000 * t for t in range(T)]
    if len(seeds) != T:
        raise ModelError("need one seed per ensemble member")
    cfgs = [replace(cfg, seed=int(s)) for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda c: train(dataset, spec, c), cfgs))
    return [train(dataset, spec, c) for c in cfgs]


# ---------------------------------------------------------------------------
# inference


def _features(model: TrainedModel, patch):
    vals = as_array(patch)
    if vals.shape[0] != model.spec.n_bands:
        raise ModelError(f"patch has {vals.shape[0]} bands, model expects {model.spec.n_bands}")
    X = pixel_features(vals, model.spec.context)
    return (X - model.feat_mean) / model.feat_std, vals.shape[1:]


def predict(model: TrainedModel, patch):
    """Eval-mode (no dropout) density and class probability per pixel."""
    X, shape = _features(model, patch)
    y, logit, _ = forward(model.params, model.spec, X)
    return y.reshape(shape), sigmoid(logit).reshape(shape)


def predict_stochastic(model: TrainedModel, patch, rng: np.random.Generator):
    """One MC-dropout forward pass (dropout active)."""
    X, shape = _features(model, patch)
    masks = dropout_masks(model.spec, len(X), rng)
    y, _, _ = forward(model.params, model.spec, X, masks)
    return y.reshape(shape)


def embed_pixels(model: TrainedModel, patch) -> np.ndarray:
    """Last-hidden-layer activations per pixel, shaped (h, w, width)."""
    X, shape = _features(model, patch)
    _, _, (acts, _, _) = forward(model.params, model.spec, X)
    return acts[-1].reshape(*shape, -1)


def embed(model: TrainedModel, patch) -> np.ndarray:
    """Patch embedding: mean of the per-pixel embedding tap."""
    e = embed_pixels(model, patch)
    return e.reshape(-1, e.shape[-1]).mean(axis=0)


def ensemble_stats(members: np.ndarray) -> EnsemblePrediction:
    members = np.asarray(members, dtype=np.float64)
    mean = members.mean(axis=0)
    # unanimous members: take the shared value so the variance is exactly 0
    same = np.all(members == members[:1], axis=0)
    mean = np.where(same, members[0], mean)
    var = np.mean((members - mean) ** 2, axis=0)
    return EnsemblePrediction(members, mean, var)


def predict_uncertainty(models, patch, mode: str = "ensemble", T: int | None = None,
                        seed: int = 0) -> EnsemblePrediction:
    """Ensemble mean and population variance of T density predictions.

    ``ensemble`` uses one eval-mode pass per model; ``mc_dropout`` runs T
    stochastic passes of the first model.
    """
    models = list(models)
    if not models:
        raise ModelError("no models given")
    if mode == "ensemble":
        T = len(models) if T is None else T
        if len(models) != T:
            raise ModelError(f"ensemble mode needs exactly T={T} models, got {len(models)}")
        members = [predict(m, patch)[0] for m in models]
    elif mode == "mc_dropout":
        model = models[0]
        if model.spec.dropout_rate == 0:
            raise ModelError("mc_dropout requires dropout_rate > 0")
        T = 5 if T is None else T
        if T < 1:
            raise ModelError("T must be >= 1")
        rng = np.random.default_rng(seed)
        members = [predict_stochastic(model, patch, rng) for _ in range(T)]
    else:
        raise ModelError(f"unknown uncertainty mode {mode!r}")
    return ensemble_stats(np.stack(members))


# ---------------------------------------------------------------------------
# checkpoint file: b"PMDL", u16 version, u32 header length, JSON header,
# then float32 arrays in header order


PMDL_MAGIC = b"PMDL"
PMDL_VERSION = 1


def _spec_from_dict(d) -> ModelSpec:
    return ModelSpec(d["n_bands"], tuple(d["hidden"]), d["context"], d["dropout_rate"])


def save_model(model: TrainedModel, path) -> None:
    arrays = dict(model.params)
    arrays["feat_mean"] = model.feat_mean
    arrays["feat_std"] = model.feat_std
    extra = {}
    if model.attention is not None:
        arrays.update({f"att_{k}": v for k, v in model.attention.arrays().items()})
        extra = model.attention.header()
    header = {
        "spec": asdict(model.spec),
        "seed": model.seed,
        "losses": model.losses,
        "attention": extra,
        "arrays": [[k, list(np.shape(a))] for k, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(PMDL_MAGIC)
    buf.write(struct.pack("<HI", PMDL_VERSION, len(blob)))
    buf.write(blob)
    for a in arrays.values():
        buf.write(np.asarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:4] != PMDL_MAGIC:
        raise ModelError(f"{path}: not a PMDL checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != PMDL_VERSION:
        raise ModelError(f"{path}: unsupported PMDL version {version}")
    header = json.loads(data[10:10 + hlen])
    off = 10 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(data):
            raise ModelError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(data, "<f4", count, off).astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(data):
        raise ModelError(f"{path}: trailing or missing payload bytes")
    spec = _spec_from_dict(header["spec"])
    mean = arrays.pop("feat_mean")
    std = arrays.pop("feat_std")
    att_arrays = {k[4:]: arrays.pop(k) for k in list(arrays) if k.startswith("att_")}
    model = TrainedModel(spec, arrays, mean, std, header["losses"], header["seed"])
    if header["attention"]:
        from densal.geoembed import Attention

        model.attention = Attention.from_saved(header["attention"], att_arrays)
    return model
