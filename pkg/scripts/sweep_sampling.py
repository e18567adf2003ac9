"""Sampling-parameter sweep (k, eta or tau) on one trained checkpoint."""

from __future__ import annotations

from dataclasses import dataclass

from _config import opt, parse, values
from vecmapdiff import pipeline as pl
from vecmapdiff.denoiser import DenoiserModel


@dataclass
class SweepConfig:
    checkpoint: str = opt("reference_run/model.ckpt", "trained checkpoint")
    data: str = opt("data", "dataset directory written by gen-data")
    axis: str = opt("k", "k, eta or tau")
    values: str = opt("1,2,3,4,5", "comma-separated values")
    val_scenes: int = opt(100, "validation scenes")
    seed: int = opt(0, "sampling seed")
    out: str = opt("sweep_sampling", "output directory")
    force: bool = opt(False, "overwrite existing outputs")


def main(argv=None) -> None:
    c = parse(SweepConfig, __doc__, argv)
    if c.axis not in pl.SAMPLING_AXES:
        raise SystemExit(f"axis must be one of {pl.SAMPLING_AXES}")
    cfg = pl.RunConfig(seed=c.seed)
    model = DenoiserModel.load(c.checkpoint, cfg.schedule())
    out = pl.prepare_output(c.out, c.force)
    vals = values(c.values, int if c.axis == "k" else float)
    rows = pl.ablate(c.axis, vals, cfg, [], pl.load_split(c.data, "val", c.val_scenes), model, out)
    pl.write_run_meta(out, "sweep_sampling", cfg, checkpoint=c.checkpoint, axis=c.axis)
    for r in rows:
        print(f"{c.axis}={r[c.axis]}  mAP {r['mAP']:.4f}  {1e3 * r['sec_per_sample']:.1f} ms/sample")


if __name__ == "__main__":
    main()
