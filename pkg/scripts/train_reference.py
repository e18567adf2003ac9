"""Reference training run: val mAP of the trained model against its untrained initialization."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

from _config import opt, parse
from vecmapdiff import pipeline as pl
from vecmapdiff.scene_synth import split_seeds


@dataclass
class ReferenceConfig:
    out: str = opt("reference_run", "output directory")
    train_scenes: int = opt(500, "training scenes")
    val_scenes: int = opt(150, "validation scenes")
    difficulty: str = opt("medium", "scene difficulty")
    epochs: int = opt(0, "training epochs; 0 keeps the TrainConfig default")
    seed: int = opt(0, "training seed (model init and batch order)")
    data_seed: int = opt(0, "dataset seed")
    force: bool = opt(False, "overwrite existing outputs")


def main(argv=None) -> None:
    c = parse(ReferenceConfig, __doc__, argv)
    out = pl.prepare_output(c.out, c.force)
    count = c.train_scenes + c.val_scenes
    data = pl.DataConfig(count=count, difficulty=c.difficulty, val_fraction=c.val_scenes / count)
    train_cfg = pl.TrainConfig() if c.epochs == 0 else dataclasses.replace(pl.TrainConfig(), epochs=c.epochs)
    cfg = pl.RunConfig(seed=c.seed, data=data, train=train_cfg)
    seeds = split_seeds(count, c.data_seed, data.val_fraction)
    train_set = pl.in_memory_split([s for s, tag in seeds if tag == "train"], data)
    val_set = pl.in_memory_split([s for s, tag in seeds if tag == "val"], data)
    model = pl.build_model(cfg)
    init = pl.quick_map(model, val_set, cfg.sampler, cfg.seed)
    t0 = time.perf_counter()
    tlog = pl.train_items(model, train_set, cfg)
    seconds = time.perf_counter() - t0
    trained = pl.quick_map(model, val_set, cfg.sampler, cfg.seed)
    model.save(out / pl.CHECKPOINT, {"config_hash": cfg.digest(), "seed": cfg.seed})
    tlog.write_csv(out / "metrics.csv")
    result = {"map_init": init, "map_trained": trained, "gap": trained - init, "train_seconds": seconds}
    (out / "result.json").write_text(json.dumps(result, indent=1))
    pl.write_run_meta(out, "train_reference", cfg, data_seed=c.data_seed, **result)
    print(f"val mAP init {init:.4f} trained {trained:.4f} gap {trained - init:+.4f} "
          f"({cfg.train.epochs} epochs, {len(train_set)} scenes, {seconds / 60:.1f} min)")


if __name__ == "__main__":
    main()
