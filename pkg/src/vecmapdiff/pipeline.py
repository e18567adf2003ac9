"""Directory-backed runs: dataset generation, training, sampling, evaluation, ablations.

Every run directory gets a ``run_meta.json`` with the config hash, code version
and seeds, which is enough to regenerate its outputs bit-exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aggregation import AggregationConfig, aggregate, sample_probabilities, uncertainty
from .denoiser import ENCODER_PARAMS, DenoiserModel, ModelConfig
from .diffusion import (PADDING_KINDS, NoiseSchedule, PaddingStrategy, SamplerConfig, build_cosine_schedule,
                        sample_map)
from .geometry import MapClass, VectorMap, read_pgm, write_grid_csv, write_pgm
from .metrics import evaluate_ap, gt_raster, roc_curve, write_ap_table
from .scene_synth import (GENERATOR_VERSION, Scene, generate_scene, observe, read_observation_csv,
                          scene_noise_seed, split_seeds, write_observation_csv)
from .training import TrainConfig, TrainingSample, train
from .visibility import compare_uncertainty

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# -- configuration -----------------------------------------------------------------------


@dataclass
class DataConfig:
    count: int = 500
    difficulty: str = "medium"
    val_fraction: float = 0.2
    noise_sigma: float = 0.05
    occluder_channel: bool = True


@dataclass
class EvalConfig:
    max_scenes: int | None = None
    export_scenes: int = 5  # scenes with PGM/CSV raster exports
    null_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    T: int = 1000
    signal_scale: float = 4.0

    def __post_init__(self):
        if self.train.padding not in PADDING_KINDS:
            raise ConfigError(f"unknown padding strategy {self.train.padding!r}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        try:
            cfg = ModelConfig.from_dict({**asdict(ModelConfig()), **self.model})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if (cfg.n_queries, cfg.n_points) != (self.sampler.n_queries, self.sampler.n_points):
            raise ConfigError("model and sampler disagree on query/point counts")
        return cfg

    def schedule(self) -> NoiseSchedule:
        try:
            return build_cosine_schedule(self.T, signal_scale=self.signal_scale)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"data": DataConfig, "train": TrainConfig, "sampler": SamplerConfig,
                    "aggregation": AggregationConfig, "eval": EvalConfig}
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for k, v in d.items():
                if k in sections:
                    v = dict(v)
                    if k == "train" and "betas" in v:
                        v["betas"] = tuple(v["betas"])
                    kw[k] = sections[k](**v)
                else:
                    kw[k] = v
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# -- run metadata ---------------------------------------------------------------------------


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_run_meta(out_dir: Path, command: str, cfg: RunConfig, **extra) -> dict:
    meta = {"command": command, "config_hash": cfg.digest(), "code_version": code_version(),
            "seed": cfg.seed, "config": cfg.to_dict(), **extra}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list))
    return meta


class OutputExists(RuntimeError):
    pass


def prepare_output(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- datasets ---------------------------------------------------------------------------------


@dataclass
class DatasetItem:
    seed: int
    scene: Scene
    obs: np.ndarray  # (4, H, W) float32


def gen_data(out_dir: str | Path, cfg: RunConfig, force: bool = False) -> dict:
    """Write scenes/<seed>.json, obs/<seed>.csv and the manifest."""
    out = prepare_output(out_dir, force)
    d = cfg.data
    (out / "scenes").mkdir(exist_ok=True)
    (out / "obs").mkdir(exist_ok=True)
    rows = []
    for seed, split in split_seeds(d.count, cfg.seed, d.val_fraction):
        scene = generate_scene(seed, d.difficulty)
        obs = observe(scene, scene_noise_seed(seed), d.noise_sigma, d.occluder_channel)
        (out / "scenes" / f"{seed}.json").write_text(scene.to_json())
        write_observation_csv(out / "obs" / f"{seed}.csv", obs)
        rows.append({"seed": seed, "split": split})
    manifest = {"generator_version": GENERATOR_VERSION, "difficulty": d.difficulty, "count": d.count,
                "seed": cfg.seed, "noise_sigma": d.noise_sigma, "scenes": rows}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_run_meta(out, "gen-data", cfg)
    return manifest


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(data_dir: str | Path, split: str, limit: int | None = None) -> list[DatasetItem]:
    data_dir = Path(data_dir)
    seeds = [r["seed"] for r in read_manifest(data_dir)["scenes"] if r["split"] == split]
    if limit is not None:
        seeds = seeds[:limit]
    items = []
    for s in seeds:
        scene = Scene.from_dict(json.loads((data_dir / "scenes" / f"{s}.json").read_text()))
        obs = read_observation_csv(data_dir / "obs" / f"{s}.csv", scene.frame).astype(np.float32)
        items.append(DatasetItem(s, scene, obs))
    return items


def in_memory_split(seeds: Sequence[int], cfg: DataConfig) -> list[DatasetItem]:
    """Same scenes as gen_data would write, without touching disk (observations not rounded)."""
    out = []
    for s in seeds:
        sc = generate_scene(s, cfg.difficulty)
        obs = observe(sc, scene_noise_seed(s), cfg.noise_sigma, cfg.occluder_channel).channels
        out.append(DatasetItem(s, sc, obs.astype(np.float32)))
    return out


# -- training -----------------------------------------------------------------------------------


def build_model(cfg: RunConfig) -> DenoiserModel:
    model = DenoiserModel.create(cfg.model_config(), cfg.schedule(), cfg.seed)
    path = cfg.train.pretrained_encoder_path
    if path:
        donor = DenoiserModel.load(path, cfg.schedule())
        for k in ENCODER_PARAMS:
            if donor.params[k].data.shape != model.params[k].data.shape:
                raise ConfigError("pretrained encoder shape does not match the model config")
            model.params[k].data = donor.params[k].data.astype(model.dtype).copy()
    return model


def quick_map(model: DenoiserModel, items: Sequence[DatasetItem], sampler: SamplerConfig, seed: int,
              padding: str = "gaussian") -> float:
    """Single-sample val mAP; used for periodic validation."""
    preds = [sample_map(model, model.encode(it.obs), sampler, model.schedule,
                        np.random.default_rng([seed, it.seed, 0]), PaddingStrategy(padding)) for it in items]
    return evaluate_ap(preds, [it.scene.gt for it in items]).mAP


def train_items(model: DenoiserModel, train_set: Sequence[DatasetItem], cfg: RunConfig,
                val_set: Sequence[DatasetItem] = (), checkpoint_dir: Path | None = None):
    data = [TrainingSample(it.obs, it.scene.gt) for it in train_set]
    validate = None
    if val_set and cfg.train.val_every:
        validate = lambda m: quick_map(m, val_set, cfg.sampler, cfg.seed, cfg.train.padding)  # noqa: E731
    return train(model, data, cfg.train, model.schedule, cfg.seed, validate, checkpoint_dir)


def train_run(data_dir: str | Path, out_dir: str | Path, cfg: RunConfig, force: bool = False,
              val_limit: int = 50) -> DenoiserModel:
    out = prepare_output(out_dir, force)
    manifest = read_manifest(data_dir)
    model = build_model(cfg)
    t0 = time.perf_counter()
    tlog = train_items(model, load_split(data_dir, "train"), cfg, load_split(data_dir, "val", val_limit), out)
    model.save(out / CHECKPOINT, {"config_hash": cfg.digest(), "seed": cfg.seed})
    tlog.write_csv(out / "metrics.csv")
    write_run_meta(out, "train", cfg, dataset_seed=manifest["seed"], checkpoint_sha256=model.checksum(),
                   train_seconds=time.perf_counter() - t0)
    return model


# -- sampling -----------------------------------------------------------------------------------


def sample_rng(run_seed: int, scene_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([run_seed, scene_seed, index])


def sample_scene(model: DenoiserModel, obs: np.ndarray, scene_seed: int, n: int, cfg: RunConfig,
                 padding: str | None = None) -> list[VectorMap]:
    """n independent maps for one scene; the encoder runs once."""
    latent = model.encode(obs)
    pad = PaddingStrategy(padding or cfg.train.padding)
    return [sample_map(model, latent, cfg.sampler, model.schedule, sample_rng(cfg.seed, scene_seed, i), pad)
            for i in range(n)]


def _sample_worker(args):
    checkpoint, cfg_dict, obs, scene_seed, n = args
    cfg = RunConfig.from_dict(cfg_dict)
    model = DenoiserModel.load(checkpoint, cfg.schedule())
    return [m.to_dict() for m in sample_scene(model, obs, scene_seed, n, cfg)]


def sample_run(checkpoint: str | Path, data_dir: str | Path, out_dir: str | Path, cfg: RunConfig,
               n: int | None = None, force: bool = False, workers: int = 1) -> dict[int, list[VectorMap]]:
    """n maps per val scene, one process per scene when workers > 1 (same files either way)."""
    model = DenoiserModel.load(checkpoint, cfg.schedule())
    out = prepare_output(out_dir, force)
    n = n or cfg.sampler.n
    items = load_split(data_dir, "val", cfg.eval.max_scenes)
    t0 = time.perf_counter()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(str(checkpoint), cfg.to_dict(), it.obs, it.seed, n) for it in items]
        with ProcessPoolExecutor(workers) as pool:
            per_scene = [[VectorMap.from_dict(d) for d in r] for r in pool.map(_sample_worker, jobs)]
    else:
        per_scene = [sample_scene(model, it.obs, it.seed, n, cfg) for it in items]
    result = {}
    for it, maps in zip(items, per_scene):
        sdir = out / "samples" / str(it.seed)
        sdir.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(maps):
            m.save(sdir / f"{i}.json", it.scene.frame)
        result[it.seed] = maps
    write_run_meta(out, "sample", cfg, n=n, checkpoint_sha256=model.checksum(),
                   seconds_per_sample=(time.perf_counter() - t0) / max(1, n * len(items)))
    return result


def read_samples(samples_dir: str | Path) -> dict[int, list[VectorMap]]:
    root = Path(samples_dir)
    if (root / "samples").is_dir():
        root = root / "samples"
    out = {}
    for sdir in sorted(root.iterdir(), key=lambda p: int(p.name)):
        files = sorted(sdir.glob("*.json"), key=lambda p: int(p.stem))
        out[int(sdir.name)] = [VectorMap.load(f) for f in files]
    return out


# -- evaluation ---------------------------------------------------------------------------------


@dataclass
class EvalReport:
    ap: object  # ApResult on the first sample of each scene
    auc_single: float
    auc_multi: float
    n_multi: int
    auc_null: float
    visibility: object | None  # VisibilityStats, None when no scene qualifies
    per_class_auc: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [
            f"mAP (n=1): {self.ap.mAP:.4f}",
            "  " + "  ".join(f"{k}={v if v == '' else f'{v:.4f}'}" for k, v in self.ap.row().items()),
            f"AUC n=1: {self.auc_single:.4f}",
            f"AUC n={self.n_multi}: {self.auc_multi:.4f}",
            f"AUC gain: {self.auc_multi - self.auc_single:+.4f} "
            f"({100 * (self.auc_multi / self.auc_single - 1):+.2f} % relative; reference +3.4 %)",
            f"AUC permutation null: {self.auc_null:.4f}",
        ]
        v = self.visibility
        if v is None:
            lines.append("uncertainty vs visibility: no scene with both visible and invisible universe cells")
        else:
            lines += [
                f"uncertainty visible mean: {v.mean_visible:.6g}",
                f"uncertainty invisible mean: {v.mean_invisible:.6g}",
                f"ratio invisible/visible: {v.ratio:.3f} (reference 1.31)",
                f"{'paired' if v.paired else 'two-sample'} one-sided t = {v.t_stat:.4g}, p = {v.p_value:.3g}, "
                f"scenes = {len(v.visible_means)}, skipped = {v.skipped}",
            ]
        return "\n".join(lines) + "\n"


def permutation_null_auc(probs: Sequence[np.ndarray], gts: Sequence[VectorMap], rng,
                         frame=None) -> float:
    """Micro AUC after a random permutation of all pooled prediction cells.

    The permutation runs across scenes, classes and cells, so every score is paired
    with an unrelated GT label and the expected AUC is exactly 0.5.
    """
    rng = np.random.default_rng(rng)
    stacked = np.stack([np.asarray(p, dtype=float) for p in probs])
    shuffled = rng.permutation(stacked.ravel()).reshape(stacked.shape)
    return roc_curve(list(shuffled), gts, *(() if frame is None else (frame,))).auc


def evaluate_samples(samples: dict[int, list[VectorMap]], scenes: dict[int, Scene], cfg: RunConfig,
                     out_dir: str | Path | None = None) -> EvalReport:
    """Aggregation, AP, ROC for n=1 and n=max, visibility statistics and exports."""
    seeds = sorted(samples)
    if cfg.eval.max_scenes is not None:
        seeds = seeds[: cfg.eval.max_scenes]
    missing = [s for s in seeds if s not in scenes]
    if missing:
        raise ConfigError(f"no ground truth for scenes {missing[:5]}")
    n_max = min(len(samples[s]) for s in seeds)
    gts = [scenes[s].gt for s in seeds]
    frame = scenes[seeds[0]].frame
    ap = evaluate_ap([samples[s][0] for s in seeds], gts, frame)
    single, multi, unc = [], [], []
    for s in seeds:
        per = [sample_probabilities(m, frame, cfg.aggregation) for m in samples[s][:n_max]]
        single.append(per[0])
        multi.append(aggregate(per))
        unc.append(uncertainty(per))
    roc1 = roc_curve(single, gts, frame)
    rocn, per_class = roc_curve(multi, gts, frame, per_class=True)
    null = permutation_null_auc(single, gts, cfg.eval.null_seed, frame)
    vis_items = [(s, u, scenes[s].visibility(), scenes[s].drivable) for s, u in zip(seeds, unc)]
    try:
        vstats = compare_uncertainty(vis_items)
    except ValueError:
        vstats = None
    report = EvalReport(ap, roc1.auc, rocn.auc, n_max, null, vstats,
                        {MapClass(c).name.lower(): (r.auc if r else None) for c, r in per_class.items()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ap_table(out / "ap.csv", [dict(ap.row(), n=1)], extra_cols=["n"])
        roc1.write_csv(out / "roc_n1.csv")
        rocn.write_csv(out / f"roc_n{n_max}.csv")
        for c, r in per_class.items():
            if r is not None:
                r.write_csv(out / f"roc_n{n_max}_{MapClass(c).name.lower()}.csv")
        if vstats is not None:
            (out / "visibility.json").write_text(json.dumps(vstats.to_dict(), indent=1))
        rdir = out / "rasters"
        rdir.mkdir(exist_ok=True)
        meta = cfg.aggregation.metadata(n_max)
        for s, d, u in list(zip(seeds, multi, unc))[: cfg.eval.export_scenes]:
            for c in MapClass:
                write_pgm(rdir / f"{s}_D_{c.name.lower()}.pgm", d[c], vmax=1.0)
                write_grid_csv(rdir / f"{s}_D_{c.name.lower()}.csv", d[c])
            write_pgm(rdir / f"{s}_U.pgm", u)
            write_grid_csv(rdir / f"{s}_U.csv", u)
            write_pgm(rdir / f"{s}_visible.pgm", scenes[s].visibility().astype(float), vmax=1.0)
            write_pgm(rdir / f"{s}_gt.pgm", gt_raster(scenes[s].gt, frame).max(axis=0), vmax=1.0)
        (rdir / "metadata.json").write_text(json.dumps(meta, indent=1))
        (out / "summary.txt").write_text(report.summary())
        (out / "report.json").write_text(json.dumps({
            "mAP": ap.mAP, "ap": ap.row(), "auc_n1": roc1.auc, f"auc_n{n_max}": rocn.auc,
            "auc_null": null, "per_class_auc": report.per_class_auc,
            "visibility": None if vstats is None else {k: v for k, v in vstats.to_dict().items() if k != "scenes"},
            "n_scenes": len(seeds), "ap_interpolation": "all-point",
        }, indent=1))
    return report


def evaluate_run(samples_dir: str | Path, data_dir: str | Path, out_dir: str | Path, cfg: RunConfig,
                 force: bool = False) -> EvalReport:
    out = prepare_output(out_dir, force)
    samples = read_samples(samples_dir)
    scenes = {it.seed: it.scene for it in load_split(data_dir, "val")}
    report = evaluate_samples(samples, scenes, cfg, out)
    write_run_meta(out, "evaluate", cfg)
    return report


# -- ablations ----------------------------------------------------------------------------------

SAMPLING_AXES = ("k", "eta", "tau")
RETRAIN_AXES = ("padding", "pretrain")
PRETRAIN_MODES = ("end_to_end", "frozen_random", "frozen_pretrained")


def _timed_map(model, items, cfg: RunConfig, padding: str, repeats: int = 5) -> tuple[float, float, object]:
    """mAP and mean seconds per sample; each scene's time is the best of `repeats` identical draws."""
    preds, elapsed = [], 0.0
    for it in items:
        latent = model.encode(it.obs)
        best = math.inf
        for _ in range(repeats):
            rng = sample_rng(cfg.seed, it.seed, 0)
            t0 = time.perf_counter()
            pred = sample_map(model, latent, cfg.sampler, model.schedule, rng, PaddingStrategy(padding))
            best = min(best, time.perf_counter() - t0)
        preds.append(pred)
        elapsed += best
    ap = evaluate_ap(preds, [it.scene.gt for it in items])
    return ap.mAP, elapsed / max(1, len(items)), ap


def ablate(axis: str, values: Sequence, cfg: RunConfig, train_set: Sequence[DatasetItem],
           val_set: Sequence[DatasetItem], model: DenoiserModel | None = None,
           out_dir: str | Path | None = None) -> list[dict]:
    """Sweep one axis. Sampling axes reuse `model`; padding/pretrain retrain per value."""
    rows = []
    if axis in SAMPLING_AXES:
        if model is None:
            raise ConfigError(f"axis {axis!r} needs a trained checkpoint")
        for v in values:
            run = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, **{axis: v}))
            m, sec, ap = _timed_map(model, val_set, run, cfg.train.padding)
            rows.append({axis: v, **ap.row(), "sec_per_sample": sec})
            log.info("%s=%s mAP %.4f (%.1f ms/sample)", axis, v, m, 1e3 * sec)
    elif axis == "padding":
        for v in values:
            if v not in PADDING_KINDS:
                raise ConfigError(f"unknown padding strategy {v!r}")
            run = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, padding=v))
            mdl = build_model(run)
            train_items(mdl, train_set, run)
            m, sec, ap = _timed_map(mdl, val_set, run, v)
            rows.append({axis: v, **ap.row(), "sec_per_sample": sec})
            log.info("padding=%s mAP %.4f", v, m)
    elif axis == "pretrain":
        donor = None
        for v in values:
            if v not in PRETRAIN_MODES:
                raise ConfigError(f"unknown pretrain mode {v!r}")
            run = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, freeze_encoder=v != "end_to_end",
                                                                     pretrained_encoder_path=None))
            mdl = build_model(run)
            if v == "frozen_pretrained":
                if donor is None:
                    raise ConfigError("frozen_pretrained needs an end_to_end run earlier in the sweep")
                for k in ENCODER_PARAMS:
                    mdl.params[k].data = donor.params[k].data.copy()
            train_items(mdl, train_set, run)
            if v == "end_to_end":
                donor = mdl
            m, sec, ap = _timed_map(mdl, val_set, run, cfg.train.padding)
            rows.append({axis: v, **ap.row(), "sec_per_sample": sec})
            log.info("pretrain=%s mAP %.4f", v, m)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"ablation_{axis}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[axis, "AP_ped", "AP_div", "AP_bound", "mAP", "sec_per_sample"])
            w.writeheader()
            w.writerows(rows)
    return rows


# -- report ---------------------------------------------------------------------------------------


def assemble_grid(images: Sequence[np.ndarray], cols: int, pad: int = 2) -> np.ndarray:
    """Tile equally sized 8-bit images into one figure with a white gutter."""
    if not images:
        raise ValueError("no images to assemble")
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    out = np.full((rows * (h + pad) - pad, cols * (w + pad) - pad), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        out[r * (h + pad): r * (h + pad) + h, c * (w + pad): c * (w + pad) + w] = img
    return out


def build_report(eval_dir: str | Path, out_dir: str | Path, force: bool = False) -> Path:
    """Collect an evaluation bundle into report.txt plus one figure per exported scene."""
    src = Path(eval_dir)
    if not (src / "summary.txt").exists():
        raise ConfigError(f"{src} is not an evaluation directory")
    out = prepare_output(out_dir, force)
    parts = [(src / "summary.txt").read_text()]
    for extra in sorted(src.glob("ablation_*.csv")):
        parts.append(f"\n{extra.stem}\n{extra.read_text()}")
    (out / "report.txt").write_text("".join(parts))
    rdir = src / "rasters"
    for gt_file in sorted(rdir.glob("*_gt.pgm")):
        s = gt_file.name.split("_")[0]
        names = [f"{s}_gt", f"{s}_D_divider", f"{s}_D_boundary", f"{s}_D_ped_crossing", f"{s}_U", f"{s}_visible"]
        imgs = [read_pgm(rdir / f"{n}.pgm") for n in names]
        write_pgm(out / f"figure_{s}.pgm", assemble_grid(imgs, len(imgs)).astype(float), vmax=255.0)
    return out
