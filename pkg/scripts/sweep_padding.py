"""Query-padding sweep: one training run per padding strategy, same data and seed."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from _config import opt, parse, values
from vecmapdiff import pipeline as pl
from vecmapdiff.diffusion import PADDING_KINDS


@dataclass
class PaddingSweepConfig:
    data: str = opt("data", "dataset directory written by gen-data")
    strategies: str = opt(",".join(PADDING_KINDS), "comma-separated padding strategies")
    train_scenes: int = opt(500, "training scenes per run")
    val_scenes: int = opt(100, "validation scenes")
    epochs: int = opt(0, "training epochs per run; 0 keeps the TrainConfig default")
    seed: int = opt(0, "training seed")
    out: str = opt("sweep_padding", "output directory")
    force: bool = opt(False, "overwrite existing outputs")


def main(argv=None) -> None:
    c = parse(PaddingSweepConfig, __doc__, argv)
    train_cfg = pl.TrainConfig() if c.epochs == 0 else dataclasses.replace(pl.TrainConfig(), epochs=c.epochs)
    cfg = pl.RunConfig(seed=c.seed, train=train_cfg)
    out = pl.prepare_output(c.out, c.force)
    rows = pl.ablate("padding", values(c.strategies), cfg, pl.load_split(c.data, "train", c.train_scenes),
                     pl.load_split(c.data, "val", c.val_scenes), out_dir=out)
    pl.write_run_meta(out, "sweep_padding", cfg)
    for r in rows:
        print(f"{r['padding']:>8}  mAP {r['mAP']:.4f}")


if __name__ == "__main__":
    main()
