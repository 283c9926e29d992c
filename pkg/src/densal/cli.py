"""Command-line driver: generate, train, stats, reduce, select, eval, bench.

Each command reads and writes files under the configured work directory;
the files are the only coupling between commands, so ``stats`` shards can run
as separate processes on separate hosts.

Layout of the work directory::

    corpus/manifest.json, corpus/trees.csv, corpus/tiles/block_NNNN/*.pgrd
    models/member_N.pmdl
    stats/nK/shard_NNN.jsonl, stats/nK/shard_NNN.pemb   (K = shard count)
    globals.json, scores.csv, selection.jsonl, selection.png
    eval/..., bench/...
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from densal import acquisition, bench, config, coreset, formats, plotting
from densal.geoembed import (
    EmbeddingError,
    LocationEncoderSpec,
    ensemble_embedding,
    read_pemb,
    train_attention,
    write_pemb,
)
from densal.model import (
    LabelledPatch,
    ModelError,
    ModelSpec,
    TrainConfig,
    TrainingError,
    ensemble_stats,
    load_model,
    predict,
    predict_stochastic,
    save_model,
    train_ensemble,
)
from densal.raster import RasterError, RasterGrid, extract_patches, generate_synthetic_scene, late_fuse

log = logging.getLogger("densal")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4


class MissingPrerequisite(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _paths(cfg, out=None):
    root = Path(out).resolve() if out else cfg.workdir
    return {
        "root": root,
        "corpus": root / "corpus",
        "manifest": root / "corpus" / "manifest.json",
        "models": root / "models",
        "stats": root / "stats" / f"n{cfg['acquisition']['shard_count']}",
        "globals": root / "globals.json",
        "scores": root / "scores.csv",
        "selection": root / "selection.jsonl",
        "eval": root / "eval",
        "bench": root / "bench",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{what} not found at {path}")
    return path


def _model_spec(cfg) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(4, tuple(m["hidden"]), m["context"], m["dropout_rate"])


def _train_cfg(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(learning_rate=t["learning_rate"], batch_size=t["batch_size"],
                       epochs=t["epochs"], seed=t["seed"])


def _encoder(cfg) -> LocationEncoderSpec:
    e = cfg["encoder"]
    return LocationEncoderSpec(e["scales"], float(e["lambda_min"]), float(e["lambda_max"]))


def _corpus_cfg(cfg) -> bench.CorpusConfig:
    c = cfg["corpus"]
    return bench.CorpusConfig(seed=c["seed"], n_blocks=c["n_blocks"], block_pixels=c["block_pixels"],
                              cloud_fraction=c["cloud_fraction"])


def _load_corpus(p):
    scenes, extra = formats.read_manifest(_require(p["manifest"], "corpus manifest (run `generate`)"))
    return {s.scene_id: s for s in scenes}, extra


def _load_tile(p, scene):
    root = p["corpus"]
    images = [formats.read_pgrd(root / f) for f in scene.images]
    clouds = [formats.read_pgrd(root / f) for f in scene.clouds]
    density = formats.read_pgrd(root / scene.density) if scene.density else None
    return images, clouds, density


def _load_models(p, T: int):
    paths = [p["models"] / f"member_{t}.pmdl" for t in range(T)]
    for f in paths:
        _require(f, "model checkpoint (run `train`)")
    return [load_model(f) for f in paths]


def _masked(grid: RasterGrid, cloud: RasterGrid, max_cloud: float) -> RasterGrid:
    return RasterGrid(grid.values, grid.geotransform, grid.nodata_mask | (cloud.values[0] >= max_cloud))


def fused_inference(models, images, clouds, max_cloud):
    """Late-fused member predictions and embeddings over all acquisitions.

    Returns (EnsemblePrediction, z (h, w, d), valid mask).
    """
    per_member = []
    for m in models:
        preds = [_masked(RasterGrid(predict(m, img)[0], img.geotransform), c, max_cloud)
                 for img, c in zip(images, clouds)]
        per_member.append(late_fuse(preds))
    valid = ~per_member[0].nodata_mask
    ens = ensemble_stats(np.stack([g.values[0] for g in per_member]))
    zs = []
    for img, c in zip(images, clouds):
        z = ensemble_embedding(models, img)
        zs.append(_masked(RasterGrid(np.moveaxis(z, -1, 0), img.geotransform), c, max_cloud))
    z = np.moveaxis(late_fuse(zs).values, 0, -1)
    return ens, z, valid


def _shard_tiles(pool_ids, shard_count, shard):
    return [bid for i, bid in enumerate(sorted(pool_ids)) if i % shard_count == shard]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, args) -> int:
    p = _paths(cfg, args.out)
    ccfg = _corpus_cfg(cfg)
    c = cfg["corpus"]
    tiles = p["corpus"] / "tiles"
    tiles.mkdir(parents=True, exist_ok=True)
    scenes, tree_sets, bounds, regimes = [], [], {}, {}
    t0 = dt.date(2019, 1, 1)
    for b in range(ccfg.n_blocks):
        params, regime = bench.block_params(ccfg, b)
        name = f"block_{b:04d}"
        d = tiles / name
        d.mkdir(exist_ok=True)
        images, clouds, stamps = [], [], []
        for t in range(c["acquisitions"]):
            cf = params.cloud_fraction if t == 0 else ccfg.cloud_fraction * (t % 2)
            sc = generate_synthetic_scene(ccfg.seed * 100_003 + b + 7_919 * t, replace(params, cloud_fraction=cf))
            formats.write_pgrd(d / f"image_{t}.pgrd", sc.image)
            formats.write_pgrd(d / f"cloud_{t}.pgrd", sc.cloud)
            images.append(f"tiles/{name}/image_{t}.pgrd")
            clouds.append(f"tiles/{name}/cloud_{t}.pgrd")
            stamps.append((t0 + dt.timedelta(days=16 * t)).isoformat())
        formats.write_pgrd(d / "density.pgrd", sc.density)
        sc.trees.block_id = name
        tree_sets.append(sc.trees)
        bounds[name] = list(sc.trees.bounds)
        regimes[name] = regime
        scenes.append(formats.SceneManifest(name, stamps, images, clouds, f"tiles/{name}/density.pgrd",
                                            meta={"block_index": b, "regime": regime}))
    formats.write_trees_csv(p["corpus"] / "trees.csv", tree_sets)
    ids = [s.scene_id for s in scenes]
    tr, va, pool = bench.split_corpus(ids, c["n_train"], c["n_val"], ccfg.seed)
    formats.write_manifest(p["manifest"], scenes, {
        "seed": ccfg.seed, "block_pixels": ccfg.block_pixels, "bounds": bounds,
        "split": {"train": sorted(tr), "val": sorted(va), "pool": sorted(pool)},
    })
    digest = formats.tree_digest(p["corpus"])
    print(json.dumps({"command": "generate", "blocks": len(scenes), "digest": digest}))
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    p = _paths(cfg, args.out)
    scenes, extra = _load_corpus(p)
    cl = cfg["clouds"]
    data, att_data = [], []
    for sid in extra["split"]["train"]:
        images, clouds, dens = _load_tile(p, scenes[sid])
        for img, cld in zip(images, clouds):
            for patch in extract_patches(img, cfg["train"]["patch_size"], cfg["train"]["patch_size"],
                                         cld, cl["train_max"]):
                data.append(LabelledPatch(patch.grid.values, patch.take(dens).values[0]))
        att_data.append((images[0], dens, clouds[0].values[0] < cl["train_max"]))
    T = cfg["acquisition"]["T"]
    models = train_ensemble(data, _model_spec(cfg), _train_cfg(cfg), T, threads=args.threads)
    p["models"].mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(models):
        m.attention = train_attention(m, att_data, _encoder(cfg), epochs=cfg["train"]["attention_epochs"],
                                      seed=m.seed)
        save_model(m, p["models"] / f"member_{t}.pmdl")
    print(json.dumps({"command": "train", "members": T, "patches": len(data),
                      "final_loss": [round(m.final_loss, 6) for m in models]}))
    return EXIT_OK


def _regions(block_pixels, side):
    per_axis = block_pixels // side
    return [(k, (k // per_axis) * side, (k % per_axis) * side) for k in range(per_axis**2)]


def cmd_stats(cfg, args) -> int:
    p = _paths(cfg, args.out)
    scenes, extra = _load_corpus(p)
    acq = cfg["acquisition"]
    models = _load_models(p, acq["T"])
    n_shards = acq["shard_count"]
    shards = range(n_shards) if args.shard is None else [args.shard]
    if args.shard is not None and not 0 <= args.shard < n_shards:
        raise config.ConfigError(f"--shard {args.shard} outside 0..{n_shards - 1}")
    side = acq["region_side"]
    regions = _regions(extra["block_pixels"], side)
    p["stats"].mkdir(parents=True, exist_ok=True)
    for shard in shards:
        stats, records = [], []
        for sid in _shard_tiles(extra["split"]["pool"], n_shards, shard):
            sc = scenes[sid]
            images, clouds, _ = _load_tile(p, sc)
            ens, z, valid = fused_inference(models, images, clouds, cfg["clouds"]["infer_max"])
            gt = images[0].geotransform
            for k, r, c in regions:
                rid = sc.meta["block_index"] * len(regions) + k
                win = np.s_[r:r + side, c:c + side]
                st = acquisition.region_stats(rid, z[win], ens.variance[win], valid[win], shard)
                if st is None:
                    continue
                stats.append(st)
                x, y = gt.pixel_center(r + (side - 1) / 2, c + (side - 1) / 2)
                records.append((rid, (float(x), float(y)), st.v / st.n))
        acquisition.write_stats_jsonl(p["stats"] / f"shard_{shard:03d}.jsonl", stats)
        write_pemb(p["stats"] / f"shard_{shard:03d}.pemb", records)
        print(json.dumps({"command": "stats", "shard": shard, "regions": len(stats)}))
    return EXIT_OK


def _all_shard_stats(cfg, p):
    n_shards = cfg["acquisition"]["shard_count"]
    stats = []
    for k in range(n_shards):
        stats += acquisition.read_stats_jsonl(_require(p["stats"] / f"shard_{k:03d}.jsonl",
                                                       f"stats for shard {k} (run `stats --shard {k}`)"))
    return stats


def cmd_reduce(cfg, args) -> int:
    p = _paths(cfg, args.out)
    stats = _all_shard_stats(cfg, p)
    glob = acquisition.global_reduce(stats)
    acquisition.write_globals(p["globals"], glob)
    print(json.dumps({"command": "reduce", "regions": len(stats), "N": glob.N,
                      "sum_s": glob.sum_s, "sum_d": glob.sum_d}))
    return EXIT_OK


def select_regions(ids, emb, g, coords, acq) -> coreset.SelectionBatch:
    """Pool the top-q regions (per strip when strips are configured) and cluster."""
    ids, g, coords = np.asarray(ids), np.asarray(g), np.asarray(coords)
    width = acq["strip_width_m"]
    if width > 0:
        strip = np.floor(coords[:, 0] / width).astype(int)
    else:
        strip = np.zeros(len(ids), dtype=int)
    keys = sorted(set(strip.tolist()))
    areas = [int(np.sum(strip == s)) for s in keys]
    budgets = coreset.allocate_by_strip(acq["B"], areas)
    entries, alternates, offset = [], [], 0
    for s, b in zip(keys, budgets):
        if b == 0:
            continue
        m = strip == s
        pool = coreset.CandidatePool.top_q(ids[m], emb[m], g[m], coords[m], acq["q"])
        batch = coreset.select_active(pool, min(b, len(pool)), seed=acq["selection_seed"])
        for e in batch.entries + batch.alternates:
            e.cluster_id += offset
        entries += batch.entries
        alternates += batch.alternates
        offset += b
    return coreset.SelectionBatch(entries, alternates, "active")


def cmd_score_select(cfg, args) -> int:
    p = _paths(cfg, args.out)
    glob = acquisition.read_globals(_require(p["globals"], "globals file (run `reduce`)"))
    stats = _all_shard_stats(cfg, p)
    scores = acquisition.score(stats, glob)
    acquisition.write_scores_csv(p["scores"], scores)

    emb, coords = {}, {}
    for k in range(cfg["acquisition"]["shard_count"]):
        for rid, xy, vec in read_pemb(_require(p["stats"] / f"shard_{k:03d}.pemb", f"embeddings of shard {k}")):
            emb[rid], coords[rid] = vec, xy
    by_id = {s.region_id: s for s in scores}
    ids = sorted(by_id)
    missing = [i for i in ids if i not in emb]
    if missing:
        raise MissingPrerequisite(f"no embedding for regions {missing[:5]}")
    batch = select_regions(ids, np.stack([emb[i] for i in ids]), [by_id[i].g for i in ids],
                           np.array([coords[i] for i in ids]), cfg["acquisition"])
    p["selection"].write_text(batch.to_jsonl())
    plotting.plot_selection([coords[i] for i in ids], [by_id[i].g for i in ids],
                            [(e.x, e.y) for e in batch.entries], p["root"] / "selection.png")
    print(batch.summary())
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    """1-ha MAE of the trained ensemble on validation blocks, plus calibration."""
    p = _paths(cfg, args.out)
    scenes, extra = _load_corpus(p)
    T = cfg["acquisition"]["T"]
    models = None if args.identity else _load_models(p, T)
    infer_max = cfg["clouds"]["infer_max"]
    maes, pixel_maes = [], []
    ens_u, ens_e, mc_u, mc_e = [], [], [], []
    rng = np.random.default_rng(cfg["train"]["seed"])
    for sid in extra["split"]["val"]:
        images, clouds, dens = _load_tile(p, scenes[sid])
        if models is None:
            pred = dens.values[0]
            valid = np.ones(pred.shape, dtype=bool)
        else:
            ens, _, valid = fused_inference(models, images, clouds, infer_max)
            pred = ens.mean
        n = (dens.height // 10) * 10
        crop = np.s_[:n, :n]
        maes.append(bench.evaluate_mae(pred[crop], dens.values[0][crop], 10, valid[crop]))
        pixel_maes.append(bench.evaluate_mae(pred, dens.values[0], 1, valid))
        if models is not None:
            v = (clouds[0].values[0] < infer_max).ravel()
            truth = dens.values[0].ravel()[v]
            e1 = ensemble_stats(np.stack([predict(m, images[0])[0] for m in models]))
            e2 = ensemble_stats(np.stack([predict_stochastic(models[0], images[0], rng) for _ in range(T)]))
            ens_u.append(e1.variance.ravel()[v])
            ens_e.append((e1.mean.ravel()[v] - truth) ** 2)
            mc_u.append(e2.variance.ravel()[v])
            mc_e.append((e2.mean.ravel()[v] - truth) ** 2)
    pct = list(range(5, 101, 5))
    calib = {}
    if ens_u:
        calib = {
            "ensemble": bench.calibration_curve(np.concatenate(ens_u), np.concatenate(ens_e), pct),
            "mc_dropout": bench.calibration_curve(np.concatenate(mc_u), np.concatenate(mc_e), pct),
        }
    mae = float(np.mean(maes))
    report = bench.EvalReport([0], {"ensemble_1ha": {0: [mae]}, "ensemble_pixel": {0: [float(np.mean(pixel_maes))]}},
                              mae, {}, calib)
    paths = report.write(p["eval"])
    if calib:
        plotting.plot_calibration(calib, p["eval"] / "calibration.png")
    print(json.dumps({"command": "eval", "mae_trees_per_ha": mae, "report": str(paths["json"])}))
    return EXIT_OK


def experiment_config(cfg) -> bench.ExperimentConfig:
    c, b = cfg["corpus"], cfg["bench"]
    return bench.ExperimentConfig(
        corpus=_corpus_cfg(cfg), n_train=c["n_train"], n_val=c["n_val"],
        budgets=tuple(b["budgets"]), repetitions=b["repetitions"], ensemble_T=cfg["acquisition"]["T"],
        eval_members=b["eval_members"], spec=_model_spec(cfg), train_cfg=_train_cfg(cfg),
        encoder=_encoder(cfg), attention_epochs=cfg["train"]["attention_epochs"],
        patch_size=cfg["train"]["patch_size"], split_seed=c["seed"], pool_q=cfg["acquisition"]["q"],
    )


def cmd_bench(cfg, args) -> int:
    p = _paths(cfg, args.out)
    report = bench.run_al_experiment(experiment_config(cfg))
    paths = report.write(p["bench"])
    plotting.plot_strategy_mae(report, p["bench"] / "mae.png")
    plotting.plot_calibration(report.calibration, p["bench"] / "calibration.png")
    print(json.dumps({"command": "bench", "runtime_s": round(report.runtime_s, 1),
                      "summary": report.summary_rows(), "report": str(paths["json"])}))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "stats": cmd_stats,
    "reduce": cmd_reduce,
    "select": cmd_score_select,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="densal", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="YAML run configuration")
    ap.add_argument("--shard", type=int, help="stats: process only this shard")
    ap.add_argument("--seed", type=int, help="override corpus.seed and train.seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for ensemble training")
    ap.add_argument("--out", help="override paths.workdir")
    ap.add_argument("--identity", action="store_true", help="eval: score ground truth as the prediction")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _error(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides = {("corpus", "seed"): args.seed, ("train", "seed"): args.seed}
        if args.threads < 1:
            raise config.ConfigError("--threads must be >= 1")
        cfg = config.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except config.ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except MissingPrerequisite as exc:
        return _error("missing_prerequisite", exc, EXIT_MISSING)
    except (formats.FormatError, RasterError, ModelError, EmbeddingError,
            acquisition.AcquisitionError, coreset.SelectionError, bench.BenchError) as exc:
        return _error("data", exc, EXIT_DATA)
    except TrainingError as exc:
        return _error("training", exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
