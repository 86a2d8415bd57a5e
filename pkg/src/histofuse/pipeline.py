"""Stage orchestration behind the CLI subcommands.

Each stage consumes upstream artifacts from the output directory, writes
its own artifact plus a <stage>.run.json manifest (command, config hash,
input digests, wall time), and is deterministic for fixed inputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import fusion, hashing, manifold, metrics, ssae, synth
from .config import PipelineConfig
from .errors import ConfigError, MissingArtifactError

SPLITS = "splits.csv"
STAIN_REF = "stain_ref.json"
HASHES = "hashes.bin"
CSML = "csml.bin"
DCA = "dca.bin"
SSAE_FILE = "ssae.bin"
HISTORY = "history.csv"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
ROTATION = "rotation.csv"
PREDICTIONS = "predictions.csv"

_PRODUCER = {
    SPLITS: "ingest",
    STAIN_REF: "ingest",
    HASHES: "hash",
    CSML: "manifold",
    DCA: "fuse",
    SSAE_FILE: "train",
}


def _require(out_dir: Path, *names: str) -> list[Path]:
    paths = []
    for name in names:
        p = out_dir / name
        if not p.is_file():
            stage = _PRODUCER.get(name, "an earlier stage")
            raise MissingArtifactError(
                f"missing artifact {name}; run the '{stage}' stage first"
            )
        paths.append(p)
    return paths


def _fused_names(split: str) -> tuple[str, str]:
    return f"fused_{split}.npy", f"fused_{split}_meta.csv"


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir: Path, command: str, cfg: PipelineConfig,
                        inputs: list[Path], started: float) -> None:
    doc = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "inputs": {p.name: _digest(p) for p in sorted(inputs)},
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    with open(out_dir / f"{command}.run.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _map_ordered(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _filtered_manifest(cfg: PipelineConfig) -> ds.Manifest:
    manifest = ds.load_manifest(cfg.root)
    mags = set(cfg.magnifications())
    entries = tuple(e for e in manifest.entries if e.magnification in mags)
    if not entries:
        raise ConfigError(
            f"no images at magnification(s) {sorted(mags)} under {cfg.root}"
        )
    return ds.Manifest(entries, manifest.root, manifest.skipped)


def _image_size(manifest: ds.Manifest, entry: ds.ManifestEntry) -> tuple[int, int]:
    from PIL import Image

    path = manifest.root / entry.source_id
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def _load_stain_ref(out_dir: Path) -> ds.StainStats:
    with open(out_dir / STAIN_REF, encoding="utf-8") as f:
        doc = json.load(f)
    return ds.StainStats(mean=np.array(doc["mean"]), std=np.array(doc["std"]))


def _patches_for(manifest: ds.Manifest, entry: ds.ManifestEntry,
                 ref: ds.StainStats, cfg: PipelineConfig) -> list[ds.Patch]:
    image = ds.load_image(manifest, entry)
    normed = ds.stain_normalize(image, ref)
    return ds.extract_patches(normed, cfg.patch_size, cfg.stride)


def run_ingest(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _filtered_manifest(cfg)

    kept = []
    for entry in manifest.entries:
        h, w = _image_size(manifest, entry)
        if min(h, w) < cfg.patch_size:
            warnings.warn(
                f"{entry.source_id}: {h}x{w} smaller than patch size "
                f"{cfg.patch_size}; rejected"
            )
            continue
        kept.append(entry)
    if not kept:
        raise ConfigError("all images rejected (smaller than patch size)")
    manifest = ds.Manifest(tuple(kept), manifest.root, manifest.skipped)

    split = ds.split_dataset(
        manifest, cfg.ratios, cfg.seed,
        split_by=cfg.get("dataset", "split_by"),
        min_stratum=cfg.get("dataset", "min_stratum"),
    )
    ds.write_splits_csv(split, out_dir / SPLITS)

    ref_entry = next(e for e in manifest.entries if e.source_id in split.train)
    ref_stats = ds.compute_stain_stats(ds.load_image(manifest, ref_entry))
    with open(out_dir / STAIN_REF, "w", encoding="utf-8") as f:
        json.dump({
            "reference": ref_entry.source_id,
            "mean": list(ref_stats.mean),
            "std": list(ref_stats.std),
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_manifest(out_dir, "ingest", cfg, [out_dir / SPLITS], started)


def run_hash(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    inputs = _require(out_dir, SPLITS, STAIN_REF)
    splits = ds.read_splits_csv(out_dir / SPLITS)
    manifest = _filtered_manifest(cfg)
    by_id = manifest.by_source_id()
    ref = _load_stain_ref(out_dir)
    hcfg = cfg.hash_config()
    layout = hashing.hash_layout(hcfg, cfg.patch_size)

    def one(source_id: str):
        entry = by_id[source_id]
        recs = []
        for patch in _patches_for(manifest, entry, ref, cfg):
            hv = hashing.local_signature(patch, hcfg)
            recs.append((source_id, patch.offset, hv.values))
        return recs

    ids = sorted(sid for sid in splits if sid in by_id)
    if not ids:
        raise ConfigError("splits.csv does not match the configured dataset")
    all_recs = _map_ordered(one, ids, cfg.threads)
    flat = [rec for recs in all_recs for rec in recs]
    hashing.write_hash_cache(out_dir / HASHES, layout, flat)
    _write_run_manifest(out_dir, "hash", cfg, inputs, started)


def _holistic_input(patch: ds.Patch, input_size: int) -> np.ndarray:
    return ds.downsample_mean(patch.pixels, input_size).ravel()


def run_manifold(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    inputs = _require(out_dir, SPLITS, STAIN_REF)
    splits = ds.read_splits_csv(out_dir / SPLITS)
    manifest = _filtered_manifest(cfg)
    by_id = manifest.by_source_id()
    ref = _load_stain_ref(out_dir)
    input_size = cfg.get("manifold", "input_size")

    train_ids = sorted(sid for sid, sp in splits.items()
                       if sp == "train" and sid in by_id)

    def vectors_of(source_id: str):
        entry = by_id[source_id]
        return entry.subclass, [
            _holistic_input(p, input_size)
            for p in _patches_for(manifest, entry, ref, cfg)
        ]

    per_class: dict[str, list[np.ndarray]] = {}
    for subclass, vecs in _map_ordered(vectors_of, train_ids, cfg.threads):
        per_class.setdefault(subclass, []).extend(vecs)

    models = {}
    for subclass in sorted(per_class):
        vectors = np.stack(per_class[subclass])
        ci = ds.SUBCLASSES.index(subclass)
        seed = int(np.random.SeedSequence([cfg.seed, ci]).generate_state(1)[0])
        m = min(cfg.get("manifold", "landmarks"), vectors.shape[0])
        models[subclass] = manifold.fit_csml(
            vectors, m=m, k=cfg.get("manifold", "k"),
            dim=cfg.get("manifold", "dim"), seed=seed, subclass=subclass,
        )
    manifold.write_csml_models(out_dir / CSML, models)
    _write_run_manifest(out_dir, "manifold", cfg, inputs, started)


def _compute_fused_streams(cfg: PipelineConfig, manifest: ds.Manifest,
                           splits: dict[str, str], ref: ds.StainStats,
                           models, hash_lookup) -> dict[str, dict]:
    """Per split: patch metadata plus holistic/hash stream matrices."""
    by_id = manifest.by_source_id()
    input_size = cfg.get("manifold", "input_size")
    k_infer = cfg.get("manifold", "k_infer")

    def one(source_id: str):
        entry = by_id[source_id]
        rows = []
        for patch in _patches_for(manifest, entry, ref, cfg):
            holistic = manifold.csml_transform(
                models, _holistic_input(patch, input_size), k_infer)
            key = (source_id, patch.offset)
            if key not in hash_lookup:
                raise MissingArtifactError(
                    f"hash cache has no record for {key}; rerun the hash stage"
                )
            rows.append((patch.offset, holistic, hash_lookup[key]))
        return entry, rows

    out: dict[str, dict] = {}
    for split in ("train", "val", "test"):
        ids = sorted(sid for sid, sp in splits.items()
                     if sp == split and sid in by_id)
        meta, xs, ys = [], [], []
        for entry, rows in _map_ordered(one, ids, cfg.threads):
            for offset, holistic, hashvec in rows:
                meta.append((entry.source_id, offset[0], offset[1],
                             entry.subclass, entry.magnification))
                xs.append(holistic)
                ys.append(hashvec)
        out[split] = {
            "meta": meta,
            "x": np.stack(xs).T if xs else np.zeros((0, 0)),
            "y": np.stack(ys).T if ys else np.zeros((0, 0)),
        }
    return out


def _write_meta(path: Path, meta) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["parent", "row", "col", "subclass", "magnification"])
        writer.writerows(meta)


def _read_meta(path: Path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["parent", "row", "col", "subclass", "magnification"]:
            raise ConfigError(f"{path}: bad fused meta header")
        return [(r[0], int(r[1]), int(r[2]), r[3], int(r[4])) for r in reader]


def run_fuse(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    inputs = _require(out_dir, SPLITS, STAIN_REF, CSML, HASHES)
    splits = ds.read_splits_csv(out_dir / SPLITS)
    manifest = _filtered_manifest(cfg)
    ref = _load_stain_ref(out_dir)
    models = manifold.read_csml_models(out_dir / CSML)
    _, records = hashing.read_hash_cache(out_dir / HASHES)
    hash_lookup = {(sid, offset): vec for sid, offset, vec in records}

    streams = _compute_fused_streams(cfg, manifest, splits, ref, models,
                                     hash_lookup)
    train = streams["train"]
    labels = np.array([m[3] for m in train["meta"]])
    model = fusion.fit_dca(train["x"], train["y"], labels,
                           cfg.get("fusion", "rank"))
    fusion.write_dca_model(out_dir / DCA, model, len(np.unique(labels)))

    for split in ("train", "val", "test"):
        npy_name, meta_name = _fused_names(split)
        data = streams[split]
        if data["x"].shape[1]:
            fused = fusion.dca_transform_batch(model, data["x"], data["y"])
        else:
            fused = np.zeros((2 * model.r, 0))
        np.save(out_dir / npy_name, fused)
        _write_meta(out_dir / meta_name, data["meta"])
    _write_run_manifest(out_dir, "fuse", cfg, inputs, started)


def _class_order_for(labels) -> tuple[str, ...]:
    present = set(labels)
    return tuple(s for s in ds.SUBCLASSES if s in present)


def run_train(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    train_npy, train_meta = _fused_names("train")
    val_npy, val_meta = _fused_names("val")
    inputs = _require(out_dir, train_npy, train_meta, val_npy, val_meta)

    x_train = np.load(out_dir / train_npy).T
    meta_train = _read_meta(out_dir / train_meta)
    x_val = np.load(out_dir / val_npy).T
    meta_val = _read_meta(out_dir / val_meta)
    if x_train.shape[0] == 0:
        raise ConfigError("no training samples in fused artifacts")

    class_order = _class_order_for([m[3] for m in meta_train])
    index = {c: i for i, c in enumerate(class_order)}
    y_train = np.array([index[m[3]] for m in meta_train], dtype=np.int64)
    try:
        y_val = np.array([index[m[3]] for m in meta_val], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"validation class {exc} unseen in training") from exc

    tcfg = cfg.train_config()
    seeds = np.random.SeedSequence([cfg.seed, 733]).generate_state(3)
    from dataclasses import replace

    ae1_cfg = replace(tcfg, seed=int(seeds[0]))
    enc1, _dec1 = ssae.train_sparse_ae(
        x_train, cfg.get("train", "hidden1"), ae1_cfg)
    h1 = ssae.encode(enc1, x_train)
    ae2_cfg = replace(tcfg, seed=int(seeds[1]))
    enc2, _dec2 = ssae.train_sparse_ae(
        h1, cfg.get("train", "hidden2"), ae2_cfg)

    stack = ssae.init_stack(enc1, enc2, class_order, int(seeds[2]))
    model, history = ssae.fine_tune(stack, x_train, y_train, x_val, y_val, tcfg)
    ssae.write_ssae_model(out_dir / SSAE_FILE, model)
    ssae.write_history_csv(out_dir / HISTORY, history)
    _write_run_manifest(out_dir, "train", cfg, inputs, started)


def aggregate_image_probs(meta, probs: np.ndarray):
    """D5 aggregation: mean of patch softmax vectors per parent image.

    Returns (parents, truths, magnifications, image_probs) with parents in
    first-seen (sorted-input) order.
    """
    order: list[str] = []
    acc: dict[str, list] = {}
    info: dict[str, tuple[str, int]] = {}
    for row, p in zip(meta, probs):
        parent, _r, _c, subclass, mag = row
        if parent not in acc:
            acc[parent] = []
            order.append(parent)
            info[parent] = (subclass, mag)
        acc[parent].append(p)
    parents = order
    image_probs = np.stack([np.mean(acc[p], axis=0) for p in parents])
    truths = [info[p][0] for p in parents]
    mags = [info[p][1] for p in parents]
    return parents, truths, mags, image_probs


def _metrics_for(truths, preds, mags, class_order,
                 tasks: tuple[str, ...]) -> tuple[metrics.MetricsReport, dict]:
    report = metrics.MetricsReport()
    matrices = {}
    for mag in sorted(set(mags)):
        sel = [i for i, m in enumerate(mags) if m == mag]
        t = [truths[i] for i in sel]
        p = [preds[i] for i in sel]
        if "multiclass" in tasks:
            cm = metrics.confusion(t, p, class_order)
            matrices[("multiclass", mag)] = cm
            recalls = dict(zip(class_order, metrics.per_class_recall(cm)))
            report.add(metrics.CellMetrics(
                task="multiclass", magnification=mag,
                ac=metrics.multiclass_accuracy(cm), recalls=recalls,
            ))
        if "binary" in tasks:
            bt = [ds.binary_class(c) for c in t]
            bp = [ds.binary_class(c) for c in p]
            cm2 = metrics.confusion(bt, bp, ds.BINARY_CLASSES)
            matrices[("binary", mag)] = cm2
            bm = metrics.binary_metrics(cm2)
            report.add(metrics.CellMetrics(
                task="binary", magnification=mag,
                ac=bm.ac, sn=bm.sn, sp=bm.sp,
            ))
    return report, matrices


def _rotation_measurement(cfg: PipelineConfig, manifest: ds.Manifest,
                          splits: dict[str, str], ref: ds.StainStats,
                          sample: int = 8) -> dict[int, float]:
    """Mean L2 distance of the svd segment under 10 and 90 degree rotation.

    Non-asserting diagnostic echoing the small-rotation-tolerance claim.
    """
    from scipy.ndimage import rotate

    by_id = manifest.by_source_id()
    ids = sorted(s for s, sp in splits.items() if sp == "test" and s in by_id)
    hcfg = cfg.hash_config()
    dists = {10: [], 90: []}
    for sid in ids[:sample]:
        patches = _patches_for(manifest, by_id[sid], ref, cfg)
        if not patches:
            continue
        px = patches[0].pixels
        base = hashing.svd_hash(px, hcfg.block, hcfg.overlap, hcfg.k)
        rot10 = rotate(px, 10.0, reshape=False, order=1, mode="nearest")
        rot90 = np.rot90(px).copy()
        for angle, rotated in ((10, rot10), (90, rot90)):
            seg = hashing.svd_hash(rotated, hcfg.block, hcfg.overlap, hcfg.k)
            dists[angle].append(float(np.linalg.norm(seg - base)))
    return {a: (float(np.mean(v)) if v else float("nan"))
            for a, v in dists.items()}


def run_evaluate(cfg: PipelineConfig, patch_level: bool = False) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    test_npy, test_meta = _fused_names("test")
    inputs = _require(out_dir, test_npy, test_meta, SSAE_FILE, SPLITS,
                      STAIN_REF)
    model = ssae.read_ssae_model(out_dir / SSAE_FILE)
    x_test = np.load(out_dir / test_npy).T
    meta = _read_meta(out_dir / test_meta)
    if x_test.shape[0] == 0:
        raise ConfigError("no test samples in fused artifacts")

    task_sel = cfg.get("run", "task")
    tasks = ("binary", "multiclass") if task_sel == "all" else (task_sel,)

    probs = ssae.predict(model, x_test)
    _parents, truths, mags, image_probs = aggregate_image_probs(meta, probs)
    preds = [model.class_order[i] for i in image_probs.argmax(axis=1)]
    report, matrices = _metrics_for(truths, preds, mags, model.class_order,
                                    tasks)

    report_csv = metrics.render_report(report, "csv")
    report_txt = metrics.render_report(report, "text")

    manifest = _filtered_manifest(cfg)
    splits = ds.read_splits_csv(out_dir / SPLITS)
    ref = _load_stain_ref(out_dir)
    rot = _rotation_measurement(cfg, manifest, splits, ref)
    with open(out_dir / ROTATION, "w", newline="", encoding="utf-8") as f:
        f.write("angle_deg,mean_svd_segment_l2\n")
        for angle in sorted(rot):
            f.write(f"{angle},{rot[angle]:.6f}\n")
    report_txt += (
        "Hash rotation measurement (svd segment, mean L2; informational)\n"
        f"{'10 deg':<12}{rot[10]:>10.6f}\n"
        f"{'90 deg':<12}{rot[90]:>10.6f}\n"
    )

    with open(out_dir / REPORT_CSV, "w", encoding="utf-8", newline="") as f:
        f.write(report_csv)
    with open(out_dir / REPORT_TXT, "w", encoding="utf-8", newline="") as f:
        f.write(report_txt)
    for (task, mag), cm in sorted(matrices.items()):
        name = f"confusion_{task}_{mag}.csv"
        with open(out_dir / name, "w", encoding="utf-8", newline="") as f:
            f.write(metrics.confusion_to_csv(cm))

    if patch_level:
        patch_preds = [model.class_order[i] for i in probs.argmax(axis=1)]
        patch_truths = [m[3] for m in meta]
        patch_mags = [m[4] for m in meta]
        patch_report, _ = _metrics_for(patch_truths, patch_preds, patch_mags,
                                       model.class_order, tasks)
        with open(out_dir / "report_patch.csv", "w", encoding="utf-8",
                  newline="") as f:
            f.write(metrics.render_report(patch_report, "csv"))
    _write_run_manifest(out_dir, "evaluate", cfg, inputs, started)


def run_predict(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    inputs = _require(out_dir, STAIN_REF, CSML, DCA, SSAE_FILE)
    manifest = _filtered_manifest(cfg)
    ref = _load_stain_ref(out_dir)
    models = manifold.read_csml_models(out_dir / CSML)
    dca = fusion.read_dca_model(out_dir / DCA)
    net = ssae.read_ssae_model(out_dir / SSAE_FILE)
    input_size = cfg.get("manifold", "input_size")
    k_infer = cfg.get("manifold", "k_infer")

    def one(entry: ds.ManifestEntry):
        patches = _patches_for(manifest, entry, ref, cfg)
        hcfg = cfg.hash_config()
        fused = []
        for patch in patches:
            holistic = manifold.csml_transform(
                models, _holistic_input(patch, input_size), k_infer)
            hv = hashing.local_signature(patch, hcfg)
            fused.append(fusion.dca_transform(dca, holistic, hv.values))
        probs = ssae.predict(net, np.stack(fused)).mean(axis=0)
        return entry.source_id, probs

    rows = _map_ordered(one, list(manifest.entries), cfg.threads)
    with open(out_dir / PREDICTIONS, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "predicted_subclass", "predicted_class",
                         "probability"])
        for source_id, probs in rows:
            idx = int(probs.argmax())
            subclass = net.class_order[idx]
            writer.writerow([
                source_id, subclass, ds.binary_class(subclass),
                f"{float(probs[idx]):.6f}",
            ])
    _write_run_manifest(out_dir, "predict", cfg, inputs, started)


def run_synth(cfg: PipelineConfig) -> None:
    started = time.monotonic()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    count = synth.generate_dataset(
        cfg.root, cfg.seed,
        cfg.get("synth", "images_per_class"),
        cfg.get("synth", "magnifications"),
    )
    if count == 0:
        raise ConfigError("synthetic generator produced no images")
    _write_run_manifest(out_dir, "synth", cfg, [], started)
