"""Batch command line: segment, patch, train, eval, predict.

Every command is deterministic given its seed; reruns with the same inputs
produce byte-identical artifacts. Output files are written atomically
(temp file plus rename) so a killed run never leaves half-written packs
or checkpoints behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import struct
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics, nifti_io, nn_core
from .augment import AugmentPolicy
from .nifti_io import NiftiError, Volume
from .patch_sampler import (PATCH_TABLE, PatchSpec, extract_patches,
                            level_spec, Sample, standardize_volume,
                            trilinear_resample)
from .rebalance import MODES
from .segmentation import (EmptySegmentation, Mask, SegmentationParams,
                           component_count, segment_lung)
from .train import TrainConfig, progressive_fit

LABELS = ("NOR", "MiNCP", "MoNCP", "SeNCP", "CrNCP")

# binary folds every positive grade into one class; the 4-way protocol
# merges the two-sample critical grade into severe
PROTOCOL_CLASSES = {
    "binary": ("NOR", "NCP"),
    "multiclass": ("NOR", "MiNCP", "MoNCP", "SeNCP"),
}
_LABEL_MAPS = {
    "binary": {l: (0 if l == "NOR" else 1) for l in LABELS},
    "multiclass": {"NOR": 0, "MiNCP": 1, "MoNCP": 2, "SeNCP": 3, "CrNCP": 3},
}


class ManifestError(Exception):
    pass


class ConfigError(Exception):
    pass


class MissingMask(Exception):
    pass


class ProtocolMismatch(Exception):
    pass


@dataclass
class ManifestRow:
    path: str
    label: str
    fold: int = None


def load_manifest(path):
    """Headerless CSV rows of path,label[,fold]; paths unique, labels known."""
    rows, seen = [], set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(str(exc)) from exc
    with fh:
        for ln, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) not in (2, 3):
                raise ManifestError(f"{path} line {ln}: expected path,label[,fold]")
            scan, label = rec[0].strip(), rec[1].strip()
            if label not in LABELS:
                raise ManifestError(
                    f"{path} line {ln}: unknown label '{label}' "
                    f"(expected one of {', '.join(LABELS)})")
            if scan in seen:
                raise ManifestError(f"{path} line {ln}: duplicate path '{scan}'")
            seen.add(scan)
            fold = None
            if len(rec) == 3 and rec[2].strip():
                try:
                    fold = int(rec[2])
                except ValueError:
                    raise ManifestError(
                        f"{path} line {ln}: fold must be an integer") from None
            rows.append(ManifestRow(scan, label, fold))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    return rows


def class_labels(rows, protocol):
    if protocol not in _LABEL_MAPS:
        raise ProtocolMismatch(f"unknown protocol '{protocol}'")
    table = _LABEL_MAPS[protocol]
    return np.array([table[r.label] for r in rows], dtype=np.int64)


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    protocol: str = "binary"
    seed: int = 0
    levels: tuple = ("P4", "P5", "P6")
    channels: tuple = nn_core.BASE_CHANNELS
    val_fraction: float = 0.2
    seg: SegmentationParams = field(default_factory=SegmentationParams)
    augment_enabled: bool = True
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)


# key -> (value kind, default); the dump order below is the file order
_KINDS = {
    "int": (int, str),
    "float": (float, repr),
    "str": (lambda s: s, str),
    "bool": (lambda s: {"true": True, "false": False}[s],
             lambda v: "true" if v else "false"),
    "ints": (lambda s: tuple(int(t) for t in s.split(",")),
             lambda v: ",".join(str(t) for t in v)),
    "floats": (lambda s: tuple(float(t) for t in s.split(",")),
               lambda v: ",".join(repr(float(t)) for t in v)),
    "strs": (lambda s: tuple(t.strip() for t in s.split(",")),
             lambda v: ",".join(v)),
}

CONFIG_KEYS = [
    ("protocol", "str", "binary"),
    ("seed", "int", 0),
    ("patch.levels", "strs", ("P4", "P5", "P6")),
    ("model.channels", "ints", tuple(nn_core.BASE_CHANNELS)),
    ("seg.hu_low", "float", -1000.0),
    ("seg.hu_high", "float", -400.0),
    ("seg.keep_k", "int", 2),
    ("seg.erode_radius", "float", 2.0),
    ("seg.close_radius", "float", 4.0),
    ("seg.connectivity", "int", 26),
    ("augment.enabled", "bool", True),
    ("augment.rotation_angles", "floats", (-25.0, -15.0, 10.0, 30.0)),
    ("augment.shift_fraction", "float", 0.20),
    ("augment.gammas", "floats", (0.7, 1.7)),
    ("augment.noise_sigma", "float", 0.02),
    ("augment.elastic_grid", "ints", (4, 4, 2)),
    ("augment.elastic_sigma", "float", 2.0),
    ("rebalance.mode", "str", "inverse_frequency"),
    ("train.lr0", "float", 1e-4),
    ("train.beta1", "float", 0.9),
    ("train.beta2", "float", 0.999),
    ("train.epsilon", "float", 1e-8),
    ("train.decay_rate", "float", 0.97),
    ("train.max_epochs", "int", 200),
    ("train.patience", "int", 15),
    ("train.batch_size", "int", 8),
    ("train.monitor", "str", "val_accuracy"),
    ("train.val_fraction", "float", 0.2),
]


def _config_from_values(values) -> RunConfig:
    v = dict(values)
    if v["protocol"] not in PROTOCOL_CLASSES:
        raise ConfigError(f"protocol must be one of {sorted(PROTOCOL_CLASSES)}")
    if v["rebalance.mode"] not in MODES:
        raise ConfigError(f"rebalance.mode must be one of {sorted(MODES)}")
    seed = v["seed"]
    try:
        seg = SegmentationParams(
            hu_low=v["seg.hu_low"], hu_high=v["seg.hu_high"],
            keep_k=v["seg.keep_k"], erode_radius=v["seg.erode_radius"],
            close_radius=v["seg.close_radius"],
            connectivity=v["seg.connectivity"])
        policy = AugmentPolicy(
            rotation_angles=v["augment.rotation_angles"],
            shift_fraction=v["augment.shift_fraction"],
            gammas=v["augment.gammas"], noise_sigma=v["augment.noise_sigma"],
            elastic_grid=v["augment.elastic_grid"],
            elastic_sigma=v["augment.elastic_sigma"], seed=seed)
        train = TrainConfig(
            lr0=v["train.lr0"], beta1=v["train.beta1"], beta2=v["train.beta2"],
            epsilon=v["train.epsilon"], decay_rate=v["train.decay_rate"],
            max_epochs=v["train.max_epochs"], patience=v["train.patience"],
            batch_size=v["train.batch_size"], seed=seed,
            weight_mode=v["rebalance.mode"], monitor=v["train.monitor"],
            augment=policy if v["augment.enabled"] else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(protocol=v["protocol"], seed=seed,
                     levels=v["patch.levels"], channels=v["model.channels"],
                     val_fraction=v["train.val_fraction"], seg=seg,
                     augment_enabled=v["augment.enabled"], policy=policy,
                     train=train)


def parse_config(text) -> RunConfig:
    """Flat `key = value` lines; '#' comments; unknown keys are errors."""
    kinds = {key: kind for key, kind, _ in CONFIG_KEYS}
    values = {key: default for key, _, default in CONFIG_KEYS}
    seen = set()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, _, val = (t.strip() for t in line.partition("="))
        if key not in kinds:
            raise ConfigError(f"line {ln}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"line {ln}: duplicate key '{key}'")
        seen.add(key)
        parse = _KINDS[kinds[key]][0]
        try:
            values[key] = parse(val)
        except (ValueError, KeyError):
            raise ConfigError(f"line {ln}: bad value for {key}: '{val}'") from None
    return _config_from_values(values)


def config_values(cfg: RunConfig):
    p = cfg.policy
    t = cfg.train
    return {
        "protocol": cfg.protocol, "seed": cfg.seed,
        "patch.levels": tuple(cfg.levels),
        "model.channels": tuple(cfg.channels),
        "seg.hu_low": cfg.seg.hu_low, "seg.hu_high": cfg.seg.hu_high,
        "seg.keep_k": cfg.seg.keep_k, "seg.erode_radius": cfg.seg.erode_radius,
        "seg.close_radius": cfg.seg.close_radius,
        "seg.connectivity": cfg.seg.connectivity,
        "augment.enabled": cfg.augment_enabled,
        "augment.rotation_angles": tuple(p.rotation_angles),
        "augment.shift_fraction": p.shift_fraction,
        "augment.gammas": tuple(p.gammas),
        "augment.noise_sigma": p.noise_sigma,
        "augment.elastic_grid": tuple(p.elastic_grid),
        "augment.elastic_sigma": p.elastic_sigma,
        "rebalance.mode": t.weight_mode,
        "train.lr0": t.lr0, "train.beta1": t.beta1, "train.beta2": t.beta2,
        "train.epsilon": t.epsilon, "train.decay_rate": t.decay_rate,
        "train.max_epochs": t.max_epochs, "train.patience": t.patience,
        "train.batch_size": t.batch_size, "train.monitor": t.monitor,
        "train.val_fraction": cfg.val_fraction,
    }


def dump_config(cfg: RunConfig):
    """Canonical text form; parse_config(dump_config(c)) == c."""
    values = config_values(cfg)
    lines = []
    for key, kind, _ in CONFIG_KEYS:
        fmt = _KINDS[kind][1]
        lines.append(f"{key} = {fmt(values[key])}")
    return "\n".join(lines) + "\n"


def load_config(path=None, seed=None) -> RunConfig:
    if path is None:
        cfg = _config_from_values({k: d for k, _, d in CONFIG_KEYS})
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(str(exc)) from exc
    if seed is not None and seed != cfg.seed:
        cfg = reseed(cfg, seed)
    return cfg


def reseed(cfg: RunConfig, seed: int) -> RunConfig:
    policy = dataclasses.replace(cfg.policy, seed=seed)
    train = dataclasses.replace(
        cfg.train, seed=seed,
        augment=policy if cfg.augment_enabled else None)
    return dataclasses.replace(cfg, seed=seed, policy=policy, train=train)


# ------------------------------------------------------------ patch packs

PACK_MAGIC = b"CTPK"
PACK_VERSION = 1


def write_pack(level, samples, path=None):
    """Little-endian container: header, then per-sample id/label/origin/f32."""
    if not samples:
        raise ValueError("refusing to write an empty pack")
    shape = samples[0].tensor.shape
    if any(s.tensor.shape != shape for s in samples):
        raise ValueError("pack samples must share one shape")
    r, c, s = shape
    parts = [PACK_MAGIC, struct.pack("<H", PACK_VERSION),
             struct.pack("<B", len(level)), level.encode("ascii"),
             struct.pack("<HHHI", r, c, s, len(samples))]
    for smp in samples:
        sid = smp.source_id.encode("utf-8")
        parts.append(struct.pack("<H", len(sid)))
        parts.append(sid)
        parts.append(struct.pack("<BHHH", int(smp.label), *smp.origin))
        parts.append(np.ascontiguousarray(smp.tensor, dtype="<f4").tobytes())
    blob = b"".join(parts)
    if path is not None:
        _atomic_write(path, blob)
    return blob


def read_pack(src):
    """Inverse of write_pack; returns (level name, list of samples)."""
    if isinstance(src, str):
        with open(src, "rb") as fh:
            blob = fh.read()
    else:
        blob = bytes(src)
    if blob[:4] != PACK_MAGIC:
        raise ValueError("not a patch pack")
    version, = struct.unpack_from("<H", blob, 4)
    if version != PACK_VERSION:
        raise ValueError(f"unsupported pack version {version}")
    nlen, = struct.unpack_from("<B", blob, 6)
    level = blob[7:7 + nlen].decode("ascii")
    off = 7 + nlen
    r, c, s, count = struct.unpack_from("<HHHI", blob, off)
    off += 10
    nbytes = r * c * s * 4
    samples = []
    for _ in range(count):
        slen, = struct.unpack_from("<H", blob, off)
        off += 2
        sid = blob[off:off + slen].decode("utf-8")
        off += slen
        label, orow, ocol, oslc = struct.unpack_from("<BHHH", blob, off)
        off += 7
        tensor = np.frombuffer(blob, dtype="<f4", count=r * c * s,
                               offset=off).reshape(r, c, s).copy()
        off += nbytes
        samples.append(Sample(tensor, int(label), sid, level,
                              (orow, ocol, oslc)))
    if off != len(blob):
        raise ValueError("trailing bytes after last pack sample")
    return level, samples


def pack_index_csv(samples):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["row", "source_id", "label", "level",
                "origin_r", "origin_c", "origin_s"])
    for i, smp in enumerate(samples):
        w.writerow([i, smp.source_id, smp.label, smp.level, *smp.origin])
    return buf.getvalue()


# --------------------------------------------------------------- helpers

def _stem(path):
    base = os.path.basename(path)
    for suffix in (".nii.gz", ".nii"):
        if base.endswith(suffix):
            return base[:-len(suffix)]
    return os.path.splitext(base)[0]


def mask_name(scan_path):
    return _stem(scan_path) + "_mask.nii.gz"


def _atomic_write(path, data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pmap(fn, items, jobs):
    # order of results always follows the input order, whatever finishes first
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_effective_config(cfg, out_dir):
    _atomic_write(os.path.join(out_dir, "effective.cfg"), dump_config(cfg))


def _read_scan(path):
    header, raw = nifti_io.read_raw(path)
    hu = nifti_io.hu_from_raw(raw, header.scl_slope, header.scl_inter)
    if not np.all(np.isfinite(hu)):
        raise NiftiError("scaling produced non-finite voxel values")
    return header, Volume(voxels=hu, spacing=header.spacing,
                          source_id=_stem(path))


def _read_mask(path, want_shape):
    _, raw = nifti_io.read_raw(path)
    if raw.shape != want_shape:
        raise NiftiError(f"mask shape {raw.shape} != scan shape {want_shape}")
    return Mask(raw > 0)


def _model_input(std: Volume, spec: nn_core.ModelSpec):
    """Standardized volume resampled to the checkpoint grid, batch of one."""
    _, d, h, w = spec.input_shape
    tensor = trilinear_resample(std.voxels, (h, w, d))
    return tensor.transpose(2, 0, 1)[None, None].astype(np.float32)


_FILE_ERRORS = (NiftiError, EmptySegmentation, MissingMask, OSError, ValueError)


# -------------------------------------------------------------- commands

def cmd_segment(args):
    cfg = load_config(args.config, args.seed)
    rows = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(cfg, args.out)

    def work(row):
        try:
            header, volume = _read_scan(row.path)
            mask = segment_lung(volume, cfg.seg)
            blob = nifti_io.write_mask(mask, header, gzipped=True)
            _atomic_write(os.path.join(args.out, mask_name(row.path)), blob)
            parts = component_count(mask, cfg.seg.connectivity)
            return (volume.source_id, mask.count(), parts), None
        except _FILE_ERRORS as exc:
            return None, f"{row.path}: {exc}"

    results = _pmap(work, rows, args.jobs)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["source_id", "lung_voxels", "components"])
    for ok, _ in results:
        if ok is not None:
            w.writerow(list(ok))
    _atomic_write(os.path.join(args.out, "summary.csv"), buf.getvalue())
    failures = [err for _, err in results if err is not None]
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    done = len(rows) - len(failures)
    print(f"segmented {done}/{len(rows)} scans -> {args.out}")
    return 1 if failures else 0


def cmd_patch(args):
    cfg = load_config(args.config, args.seed)
    rows = load_manifest(args.manifest)
    if args.level not in PATCH_TABLE:
        raise ConfigError(
            f"unknown level '{args.level}' (expected one of {', '.join(PATCH_TABLE)})")
    spec = level_spec(args.level)
    labels = class_labels(rows, cfg.protocol)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(cfg, args.out)

    def work(pair):
        index, row = pair
        try:
            mask_path = os.path.join(args.masks, mask_name(row.path))
            if not os.path.exists(mask_path):
                raise MissingMask(f"no mask at {mask_path}")
            _, volume = _read_scan(row.path)
            mask = _read_mask(mask_path, volume.voxels.shape)
            std = standardize_volume(volume, mask)
            scan_seed = int(np.random.SeedSequence(
                [cfg.seed, index]).generate_state(1)[0])
            patches = extract_patches(std, mask, spec, scan_seed,
                                      label=int(labels[index]))
            return patches, None
        except _FILE_ERRORS as exc:
            return None, f"{row.path}: {exc}"

    results = _pmap(work, list(enumerate(rows)), args.jobs)
    failures = [err for _, err in results if err is not None]
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    if failures:
        return 1
    samples = [smp for patches, _ in results for smp in patches]
    write_pack(args.level, samples, os.path.join(args.out, f"{args.level}.pack"))
    _atomic_write(os.path.join(args.out, f"{args.level}_index.csv"),
                  pack_index_csv(samples))
    print(f"packed {len(samples)} {args.level} patches "
          f"from {len(rows)} scans -> {args.out}")
    return 0


def _load_level_datasets(cfg, packs_dir):
    """Read one pack per configured level; deterministic stratified split."""
    k = max(2, int(round(1.0 / cfg.val_fraction)))
    specs, datasets = [], {}
    for name in cfg.levels:
        path = os.path.join(packs_dir, f"{name}.pack")
        if not os.path.exists(path):
            raise ConfigError(f"missing pack for level {name}: {path}")
        level, samples = read_pack(path)
        if level != name:
            raise ConfigError(f"{path} holds level {level}, expected {name}")
        if name in PATCH_TABLE:
            specs.append(level_spec(name))
        else:
            specs.append(PatchSpec(name, samples[0].tensor.shape, 1))
        sample_labels = [smp.label for smp in samples]
        try:
            folds = metrics.kfold_split(sample_labels, k=k, seed=cfg.seed)
        except metrics.TooFewSamples as exc:
            raise ConfigError(f"level {name}: {exc}") from exc
        train_set = [smp for smp, f in zip(samples, folds) if f != 0]
        val_set = [smp for smp, f in zip(samples, folds) if f == 0]
        datasets[name] = (train_set, val_set)
    return specs, datasets


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(cfg, args.out)
    specs, datasets = _load_level_datasets(cfg, args.packs)
    class_count = len(PROTOCOL_CLASSES[cfg.protocol])

    def log(level, stats):
        print(f"[{level}] epoch {stats.epoch}: "
              f"train_loss {stats.train_loss:.4f} acc {stats.train_acc:.4f} "
              f"val_loss {stats.val_loss:.4f} val_acc {stats.val_acc:.4f} "
              f"lr {stats.lr:.3e}")

    _, results = progressive_fit(specs, datasets, cfg.train, class_count,
                                 channels=cfg.channels, log=log)

    history = io.StringIO()
    w = csv.writer(history)
    w.writerow(["level", "epoch", "train_loss", "train_acc",
                "val_loss", "val_acc", "lr"])
    blob = None
    for res in results:
        blob = nn_core.save_checkpoint(res.spec, res.best_weights)
        _atomic_write(os.path.join(args.out, f"checkpoint_{res.level}.ctck"), blob)
        for h in res.history:
            w.writerow([res.level, h.epoch, repr(h.train_loss), repr(h.train_acc),
                        repr(h.val_loss), repr(h.val_acc), repr(h.lr)])
    _atomic_write(os.path.join(args.out, "checkpoint_final.ctck"), blob)
    _atomic_write(os.path.join(args.out, "history.csv"), history.getvalue())
    print(f"trained {len(results)} levels -> {args.out}")
    return 0


def _fold_assignment(rows, labels, k, seed):
    overrides = [r.fold for r in rows]
    given = [f for f in overrides if f is not None]
    if given and len(given) != len(rows):
        raise ManifestError("either every row sets a fold or none do")
    if given:
        folds = np.array(overrides, dtype=np.int64)
        if folds.min() < 0 or folds.max() >= k:
            raise ManifestError(f"fold overrides outside [0,{k})")
        return folds
    return metrics.kfold_split(labels, k=k, seed=seed)


def cmd_eval(args):
    cfg = load_config(args.config, args.seed)
    protocol = args.protocol or cfg.protocol
    names = PROTOCOL_CLASSES.get(protocol)
    if names is None:
        raise ProtocolMismatch(f"unknown protocol '{protocol}'")
    try:
        spec, weights = nn_core.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad checkpoint {args.checkpoint}: {exc}") from exc
    if spec.class_count != len(names):
        raise ProtocolMismatch(
            f"checkpoint has {spec.class_count} classes, "
            f"protocol '{protocol}' needs {len(names)}")
    rows = load_manifest(args.manifest)
    labels = class_labels(rows, protocol)
    folds = _fold_assignment(rows, labels, args.folds, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(cfg, args.out)

    def work(row):
        try:
            _, volume = _read_scan(row.path)
            if args.masks is not None:
                mask = _read_mask(os.path.join(args.masks, mask_name(row.path)),
                                  volume.voxels.shape)
            else:
                mask = segment_lung(volume, cfg.seg)
            std = standardize_volume(volume, mask)
            x = _model_input(std, spec)
            probs = nn_core.model_forward(spec, weights, x, mode="infer")
            return probs[0], None
        except _FILE_ERRORS as exc:
            return None, f"{row.path}: {exc}"

    results = _pmap(work, rows, args.jobs)
    failures = [err for _, err in results if err is not None]
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    if failures:
        return 1
    probs = np.stack([p for p, _ in results])

    summaries = []
    for f in range(args.folds):
        pick = folds == f
        report = metrics.evaluate_probs(probs[pick], labels[pick], fold_id=f)
        _atomic_write(os.path.join(args.out, f"fold{f}_report.csv"),
                      metrics.report_csv(report, list(names)))
        if report.roc_points is not None:
            buf = io.StringIO()
            w = csv.writer(buf)
            w.writerow(["class", "fpr", "tpr"])
            for c, points in enumerate(report.roc_points):
                for x, y in points:
                    w.writerow([names[c], repr(float(x)), repr(float(y))])
            _atomic_write(os.path.join(args.out, f"fold{f}_roc.csv"),
                          buf.getvalue())
        summaries.append(report)

    rates = {
        "accuracy": [r.weighted_recall for r in summaries],
        "weighted_precision": [r.weighted_precision for r in summaries],
        "weighted_f1": [r.weighted_f1 for r in summaries],
    }
    if all(r.macro_auc is not None for r in summaries):
        rates["macro_auc"] = [r.macro_auc for r in summaries]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "mean", "std"])
    for name, vals in rates.items():
        w.writerow([name, repr(float(np.mean(vals))), repr(float(np.std(vals)))])
        print(f"{name}: {np.mean(vals):.4f} +/- {np.std(vals):.4f}")
    _atomic_write(os.path.join(args.out, "aggregate.csv"), buf.getvalue())
    return 0


def cmd_predict(args):
    cfg = load_config(args.config, args.seed)
    try:
        spec, weights = nn_core.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad checkpoint {args.checkpoint}: {exc}") from exc
    if args.protocol is not None:
        names = PROTOCOL_CLASSES.get(args.protocol)
        if names is None or len(names) != spec.class_count:
            raise ProtocolMismatch(
                f"protocol '{args.protocol}' does not fit a "
                f"{spec.class_count}-class checkpoint")
    else:
        by_count = {len(v): v for v in PROTOCOL_CLASSES.values()}
        names = by_count.get(spec.class_count,
                             tuple(f"class{i}" for i in range(spec.class_count)))
    try:
        _, volume = _read_scan(args.scan)
        mask = segment_lung(volume, cfg.seg)
    except _FILE_ERRORS as exc:
        print(f"error: {args.scan}: {exc}", file=sys.stderr)
        return 1
    std = standardize_volume(volume, mask)
    probs = nn_core.model_forward(spec, weights, _model_input(std, spec),
                                  mode="infer")[0]
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        print("error: checkpoint produced non-normalized probabilities",
              file=sys.stderr)
        return 1
    for name, p in zip(names, probs):
        print(f"{name} {p:.6f}")
    print(f"label: {names[int(np.argmax(probs))]}")
    return 0


# ------------------------------------------------------------------ main

def _common_flags(sub, out=True):
    sub.add_argument("--config", default=None, help="run configuration file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--jobs", type=int, default=1,
                     help="parallel workers for per-scan stages")
    sub.add_argument("--deterministic", action="store_true",
                     help="force single-worker execution")
    if out:
        sub.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctscreen",
        description="Chest CT screening pipeline: lung segmentation, patch "
                    "extraction, progressive 3D-CNN training and evaluation.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("segment", help="write lung masks for every scan")
    p.add_argument("--manifest", required=True)
    _common_flags(p)
    p.set_defaults(fn=cmd_segment)

    p = subs.add_parser("patch", help="cut a patch pack at one pyramid level")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True, help="directory of mask files")
    p.add_argument("--level", required=True,
                   help=f"one of {', '.join(PATCH_TABLE)}")
    _common_flags(p)
    p.set_defaults(fn=cmd_patch)

    p = subs.add_parser("train", help="progressive training over patch packs")
    p.add_argument("--packs", required=True,
                   help="directory holding <level>.pack files")
    _common_flags(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="cross-validated evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=sorted(PROTOCOL_CLASSES), default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--masks", default=None,
                   help="reuse segment output instead of re-segmenting")
    _common_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("predict", help="classify one scan")
    p.add_argument("scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=sorted(PROTOCOL_CLASSES), default=None)
    _common_flags(p, out=False)
    p.set_defaults(fn=cmd_predict)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        args.jobs = 1
    try:
        return args.fn(args)
    except (ManifestError, ConfigError, ProtocolMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
