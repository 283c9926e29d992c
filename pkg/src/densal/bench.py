"""Desk-scale active-learning benchmark on a fully labelled synthetic corpus.

A corpus is a set of square blocks scattered over a planar map. Each block
belongs to a spectral regime that is mostly decided by the geographic zone it
falls in, so a geographically clustered batch tends to see few regimes while
a diverse batch sees many. The benchmark trains a base ensemble on a small
labelled split, lets each strategy pick blocks from the unlabelled pool,
retrains from scratch on base + picked blocks and reports validation MAE.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from densal import acquisition, coreset
from densal.geoembed import LocationEncoderSpec, ensemble_embedding, train_attention
from densal.model import (
    LabelledPatch,
    ModelSpec,
    TrainConfig,
    ensemble_stats,
    predict,
    predict_stochastic,
    train,
    train_ensemble,
)
from densal.raster import (
    INFER_MAX_CLOUD,
    TRAIN_MAX_CLOUD,
    PlantingBlock,
    RasterGrid,
    Scene,
    SceneParams,
    SpectralModel,
    extract_patches,
    generate_synthetic_scene,
)

log = logging.getLogger(__name__)

STRATEGIES = ("active", "naive", "manual")


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    seed: int = 0
    n_blocks: int = 126
    block_pixels: int = 64
    gsd: float = 10.0
    spacing_m: float = 3000.0
    n_zones: int = 8
    regime_flip: float = 0.15
    empty_fraction: float = 0.2
    noise: float = 0.02
    texture: float = 0.03
    cloud_fraction: float = 0.05


@dataclass
class Block:
    block_id: int
    regime: int
    scene: Scene

    @property
    def center(self) -> tuple[float, float]:
        g = self.scene.image
        half = g.width * g.geotransform.pixel_size / 2
        return (g.geotransform.origin_x + half, g.geotransform.origin_y - half)


def block_params(cfg: CorpusConfig, block_id: int) -> tuple[SceneParams, int]:
    """Layout of one block; depends only on (cfg.seed, block_id)."""
    layout_rng = np.random.default_rng([cfg.seed, 0])
    n_cols = int(math.ceil(math.sqrt(cfg.n_blocks * 1.5)))
    zone_xy = layout_rng.uniform(0, 1, (cfg.n_zones, 2))
    sp = SpectralModel()
    zone_regime = np.arange(cfg.n_zones) % sp.n_classes
    layout_rng.shuffle(zone_regime)

    rng = np.random.default_rng([cfg.seed, 1, block_id])
    gx, gy = block_id % n_cols, block_id // n_cols
    n_rows = int(math.ceil(cfg.n_blocks / n_cols))
    jitter = rng.uniform(-0.25, 0.25, 2) * cfg.spacing_m
    x0 = gx * cfg.spacing_m + jitter[0]
    y0 = -(gy * cfg.spacing_m) + jitter[1]
    rel = np.array([gx / max(n_cols - 1, 1), gy / max(n_rows - 1, 1)])
    zone = int(np.argmin(np.sum((zone_xy - rel) ** 2, axis=1)))
    regime = int(zone_regime[zone])
    if rng.random() < cfg.regime_flip:
        regime = int(rng.integers(sp.n_classes))

    side = cfg.block_pixels * cfg.gsd
    blocks = []
    if rng.random() >= cfg.empty_fraction:
        for _ in range(int(rng.integers(1, 4))):
            w, h = rng.uniform(0.25, 0.7, 2) * side
            bx, by = rng.uniform(0, side - w), rng.uniform(0, side - h)
            blocks.append(PlantingBlock(bx, by, bx + w, by + h,
                                        spacing=float(rng.uniform(7.5, 10.5)),
                                        pattern=str(rng.choice(["square", "triangular"]))))
    params = SceneParams(
        width=cfg.block_pixels, height=cfg.block_pixels,
        origin_x=float(x0), origin_y=float(y0), gsd=cfg.gsd,
        blocks=blocks, background_class=regime,
        noise=cfg.noise, texture=cfg.texture,
        cloud_fraction=cfg.cloud_fraction if rng.random() < 0.5 else 0.0,
        spectral=sp,
    )
    return params, regime


def generate_corpus(cfg: CorpusConfig) -> list[Block]:
    out = []
    for b in range(cfg.n_blocks):
        params, regime = block_params(cfg, b)
        out.append(Block(b, regime, generate_synthetic_scene(cfg.seed * 100_003 + b, params)))
    return out


# ---------------------------------------------------------------------------
# metrics


def evaluate_mae(pred: RasterGrid, truth: RasterGrid, block_side: int = 10, valid=None) -> float:
    """MAE of tree counts summed per block_side x block_side block, in trees/ha.

    With 10 m pixels and block_side 10 each block is one hectare. Blocks
    containing any invalid pixel are skipped when ``valid`` is given.
    """
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    p = p[0] if p.ndim == 3 else p
    t = t[0] if t.ndim == 3 else t
    if p.shape != t.shape:
        raise BenchError(f"prediction {p.shape} and truth {t.shape} not aligned")
    gts = [getattr(x, "geotransform", None) for x in (pred, truth)]
    if None not in gts and gts[0] != gts[1]:
        raise BenchError("prediction and truth geotransforms differ")
    h, w = p.shape
    if block_side < 1 or h % block_side or w % block_side:
        raise BenchError(f"block_side {block_side} does not divide {h}x{w}")
    gsd = gts[1].pixel_size if gts[1] is not None else 10.0
    area_ha = (block_side * gsd) ** 2 / 10_000.0

    def blocks(a):
        return a.reshape(h // block_side, block_side, w // block_side, block_side).sum(axis=(1, 3))

    err = np.abs(blocks(p) - blocks(t))
    if valid is not None:
        ok = blocks(np.asarray(valid, dtype=np.float64)) == block_side**2
        err = err[ok]
    if err.size == 0:
        raise BenchError("no complete valid block to evaluate")
    return float(err.mean() / area_ha)


def calibration_curve(uncertainties, squared_errors, percentiles) -> list[tuple[float, float]]:
    """MSE over samples whose uncertainty is at or below each percentile."""
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    e = np.asarray(squared_errors, dtype=np.float64).ravel()
    if len(u) != len(e) or len(u) == 0:
        raise BenchError("uncertainties and squared errors must be equal, non-empty")
    order = np.argsort(u, kind="stable")
    u_sorted = u[order]
    csum = np.cumsum(e[order])
    curve = []
    for p in percentiles:
        if not 0 < p <= 100:
            raise BenchError(f"percentile {p} outside (0, 100]")
        thr = np.percentile(u, p)
        k = int(np.searchsorted(u_sorted, thr, side="right"))
        curve.append((float(p), float(csum[k - 1] / k)))
    return curve


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    n_train: int = 10
    n_val: int = 10
    budgets: tuple[int, ...] = (5, 10, 15)
    strategies: tuple[str, ...] = STRATEGIES
    repetitions: int = 5
    ensemble_T: int = 5
    eval_members: int = 1
    spec: ModelSpec = field(default_factory=lambda: ModelSpec(hidden=(32, 32), dropout_rate=0.1))
    train_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=3e-3, batch_size=16, epochs=30, seed=0))
    encoder: LocationEncoderSpec = field(default_factory=LocationEncoderSpec)
    attention_epochs: int = 5
    patch_size: int = 16
    eval_block_side: int = 1
    percentiles: tuple[float, ...] = tuple(range(5, 101, 5))
    split_seed: int = 0
    pool_q: int = coreset.DEFAULT_POOL_SIZE
    cluster_threshold: int = 1000

    def __post_init__(self):
        if list(self.budgets) != sorted(self.budgets):
            raise BenchError("budgets must be ascending")
        if self.repetitions < 1:
            raise BenchError("repetitions must be >= 1")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise BenchError(f"unknown strategies {sorted(unknown)}")


@dataclass
class EvalReport:
    budgets: list[int]
    mae: dict[str, dict[int, list[float]]]
    base_mae: float
    selections: dict[str, dict[int, list[list[int]]]]
    calibration: dict[str, list[tuple[float, float]]]
    runtime_s: float = 0.0  # wall clock, not serialized

    def summary_rows(self):
        rows = []
        for strat, per in self.mae.items():
            for b in self.budgets:
                vals = per[b]
                rows.append({
                    "strategy": strat, "budget": b,
                    "mae_mean": float(np.mean(vals)),
                    "mae_std": float(np.std(vals)) if len(vals) > 1 else 0.0,
                    "runs": len(vals),
                })
        return rows

    def mean_mae(self, strategy: str, budget: int) -> float:
        return float(np.mean(self.mae[strategy][budget]))

    def to_json(self) -> dict:
        return {
            "budgets": self.budgets,
            "base_mae": self.base_mae,
            "mae": {s: {str(b): v for b, v in per.items()} for s, per in self.mae.items()},
            "selections": {s: {str(b): v for b, v in per.items()} for s, per in self.selections.items()},
            "calibration": {k: [list(p) for p in v] for k, v in self.calibration.items()},
            "summary": self.summary_rows(),
        }

    @classmethod
    def from_json(cls, d) -> "EvalReport":
        return cls(
            [int(b) for b in d["budgets"]],
            {s: {int(b): v for b, v in per.items()} for s, per in d["mae"].items()},
            float(d["base_mae"]),
            {s: {int(b): v for b, v in per.items()} for s, per in d["selections"].items()},
            {k: [tuple(p) for p in v] for k, v in d["calibration"].items()},
        )

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "mae.csv", "calibration": out / "calibration.csv"}
        paths["json"].write_text(json.dumps(self.to_json(), indent=1))
        with open(paths["csv"], "w", newline="") as fh:
            wr = csv.DictWriter(fh, ["strategy", "budget", "mae_mean", "mae_std", "runs"])
            wr.writeheader()
            wr.writerow({"strategy": "base", "budget": 0, "mae_mean": self.base_mae, "mae_std": 0.0, "runs": 1})
            wr.writerows(self.summary_rows())
        with open(paths["calibration"], "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["method", "percentile", "retained_mse"])
            for method, curve in self.calibration.items():
                for p, m in curve:
                    wr.writerow([method, p, m])
        return paths


def training_set(blocks, patch_size: int, max_cloud: float = TRAIN_MAX_CLOUD) -> list[LabelledPatch]:
    """Cloud-filtered labelled patches cut from whole blocks."""
    out = []
    for b in blocks:
        sc = b.scene
        for p in extract_patches(sc.image, patch_size, patch_size, sc.cloud, max_cloud):
            out.append(LabelledPatch(p.grid.values, p.take(sc.density).values[0]))
    return out


def split_corpus(blocks, n_train: int, n_val: int, seed: int):
    if n_train + n_val >= len(blocks):
        raise BenchError("train + val splits leave no unlabelled pool")
    order = np.random.default_rng(seed).permutation(len(blocks))
    train_b = [blocks[i] for i in order[:n_train]]
    val_b = [blocks[i] for i in order[n_train:n_train + n_val]]
    pool_b = [blocks[i] for i in sorted(order[n_train + n_val:])]
    return train_b, val_b, pool_b


def attach_attention(models, blocks, encoder: LocationEncoderSpec, epochs: int):
    data = [(b.scene.image, b.scene.density, b.scene.cloud.values[0] < TRAIN_MAX_CLOUD) for b in blocks]
    for m in models:
        m.attention = train_attention(m, data, encoder, epochs=epochs, seed=m.seed)
    return models


def block_region_stats(models, block: Block, region_id: int, max_cloud: float = INFER_MAX_CLOUD):
    """Stats pass for a whole block treated as one region."""
    img = block.scene.image
    ens = ensemble_stats(np.stack([predict(m, img)[0] for m in models]))
    z = ensemble_embedding(models, img)
    valid = block.scene.cloud.values[0] < max_cloud
    return acquisition.region_stats(region_id, z, ens.variance, valid)


def score_pool(models, pool_blocks, max_cloud: float = INFER_MAX_CLOUD):
    """Two-pass acquisition over pool blocks -> (scores by block id, embeddings)."""
    stats, emb = [], {}
    for b in pool_blocks:
        st = block_region_stats(models, b, b.block_id, max_cloud)
        if st is not None:
            stats.append(st)
            emb[b.block_id] = st.v / st.n
    glob = acquisition.global_reduce(stats)
    scores = acquisition.score(stats, glob)
    return {s.region_id: s for s in scores}, emb


def _eval_models(train_blocks, cfg: ExperimentConfig):
    data = training_set(train_blocks, cfg.patch_size)
    return [train(data, cfg.spec, replace(cfg.train_cfg, seed=cfg.train_cfg.seed + 7919 * k))
            for k in range(cfg.eval_members)]


def validation_mae(models, val_blocks, block_side: int) -> float:
    """Mean over validation blocks of the block-aggregated MAE (trees/ha)."""
    maes = []
    for b in val_blocks:
        sc = b.scene
        pred = np.mean([predict(m, sc.image)[0] for m in models], axis=0)
        valid = sc.cloud.values[0] < INFER_MAX_CLOUD
        maes.append(evaluate_mae(RasterGrid(pred, sc.density.geotransform), sc.density, block_side, valid))
    return float(np.mean(maes))


def calibration_study(models, val_blocks, percentiles, T: int, seed: int = 0):
    """Retained-MSE curves of explicit ensemble vs MC-dropout on validation pixels."""
    ens_u, ens_e, mc_u, mc_e = [], [], [], []
    rng = np.random.default_rng(seed)
    for b in val_blocks:
        sc = b.scene
        valid = (sc.cloud.values[0] < INFER_MAX_CLOUD).ravel()
        truth = sc.density.values[0].ravel()[valid]
        ens = ensemble_stats(np.stack([predict(m, sc.image)[0] for m in models[:T]]))
        mc = ensemble_stats(np.stack([predict_stochastic(models[0], sc.image, rng) for _ in range(T)]))
        ens_u.append(ens.variance.ravel()[valid])
        ens_e.append((ens.mean.ravel()[valid] - truth) ** 2)
        mc_u.append(mc.variance.ravel()[valid])
        mc_e.append((mc.mean.ravel()[valid] - truth) ** 2)
    return {
        "ensemble": calibration_curve(np.concatenate(ens_u), np.concatenate(ens_e), percentiles),
        "mc_dropout": calibration_curve(np.concatenate(mc_u), np.concatenate(mc_e), percentiles),
    }


def select_blocks(strategy: str, budget: int, rep: int, pool_blocks, scores, emb, cfg: ExperimentConfig):
    ids = np.array([b.block_id for b in pool_blocks])
    coords = np.array([b.center for b in pool_blocks])
    if strategy == "active":
        keep = [i for i, b in enumerate(pool_blocks) if b.block_id in scores]
        pool = coreset.CandidatePool.top_q(
            ids[keep], np.stack([emb[ids[i]] for i in keep]),
            [scores[ids[i]].g for i in keep], coords[keep], cfg.pool_q)
        if len(pool) <= cfg.cluster_threshold:
            batch = coreset.select_top(pool, budget)
        else:
            batch = coreset.select_active(pool, budget, seed=cfg.split_seed)
    elif strategy == "naive":
        batch = coreset.select_naive(ids, coords, budget, seed=1000 * rep + budget)
    else:
        batch = coreset.select_manual(ids, coords, budget, seed=1000 * rep + budget)
    return batch.region_ids


def run_al_experiment(cfg: ExperimentConfig, blocks=None) -> EvalReport:
    """Strategy x budget sweep; active runs once (it is deterministic)."""
    t0 = time.perf_counter()
    blocks = generate_corpus(cfg.corpus) if blocks is None else blocks
    train_b, val_b, pool_b = split_corpus(blocks, cfg.n_train, cfg.n_val, cfg.split_seed)
    if cfg.budgets and max(cfg.budgets) > len(pool_b):
        raise BenchError(f"budget {max(cfg.budgets)} exceeds pool of {len(pool_b)} blocks")
    by_id = {b.block_id: b for b in blocks}

    base_data = training_set(train_b, cfg.patch_size)
    ensemble = train_ensemble(base_data, cfg.spec, cfg.train_cfg, cfg.ensemble_T)
    attach_attention(ensemble, train_b, cfg.encoder, cfg.attention_epochs)
    scores, emb = score_pool(ensemble, pool_b)
    log.info("scored %d pool blocks", len(scores))

    base_mae = validation_mae(_eval_models(train_b, cfg), val_b, cfg.eval_block_side)
    log.info("base MAE %.4f", base_mae)
    calib = calibration_study(ensemble, val_b, cfg.percentiles, cfg.ensemble_T, seed=cfg.split_seed)

    mae = {s: {} for s in cfg.strategies}
    sels = {s: {} for s in cfg.strategies}
    for strat in cfg.strategies:
        reps = 1 if strat == "active" else cfg.repetitions
        for budget in cfg.budgets:
            mae[strat][budget], sels[strat][budget] = [], []
            for rep in range(reps):
                if budget == 0:
                    picked = []
                    value = base_mae
                else:
                    picked = select_blocks(strat, budget, rep, pool_b, scores, emb, cfg)
                    models = _eval_models(train_b + [by_id[i] for i in picked], cfg)
                    value = validation_mae(models, val_b, cfg.eval_block_side)
                mae[strat][budget].append(value)
                sels[strat][budget].append([int(i) for i in picked])
                log.info("%s B=%d rep=%d MAE %.4f", strat, budget, rep, value)
    return EvalReport(list(cfg.budgets), mae, base_mae, sels, calib, time.perf_counter() - t0)
