"""End-to-end run on a small easy dataset: data, training, sampling, evaluation, report."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from _config import opt, parse
from vecmapdiff import pipeline as pl


@dataclass
class ToyConfig:
    out: str = opt("toy_run", "output directory")
    count: int = opt(200, "scenes in the dataset")
    difficulty: str = opt("easy", "scene difficulty")
    epochs: int = opt(20, "training epochs")
    n: int = opt(4, "samples per val scene")
    seed: int = opt(0, "global seed")
    force: bool = opt(False, "overwrite existing outputs")


def main(argv=None) -> None:
    c = parse(ToyConfig, __doc__, argv)
    root = Path(c.out)
    cfg = pl.RunConfig(seed=c.seed, data=pl.DataConfig(count=c.count, difficulty=c.difficulty),
                       train=dataclasses.replace(pl.TrainConfig(), epochs=c.epochs))
    pl.gen_data(root / "data", cfg, c.force)
    pl.train_run(root / "data", root / "train", cfg, c.force)
    pl.sample_run(root / "train" / pl.CHECKPOINT, root / "data", root / "samples", cfg, c.n, c.force)
    report = pl.evaluate_run(root / "samples", root / "data", root / "eval", cfg, c.force)
    pl.build_report(root / "eval", root / "report", c.force)
    print(report.summary(), end="")
    print(f"outputs in {root}")


if __name__ == "__main__":
    main()
