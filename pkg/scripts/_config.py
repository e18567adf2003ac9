"""Turn a flat dataclass config into command-line flags."""

from __future__ import annotations

import argparse
import dataclasses
import logging


def parse(cls, description: str, argv=None):
    ap = argparse.ArgumentParser(description=description,
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        help_text = f.metadata.get("help", "")
        if f.type in ("bool", bool):
            ap.add_argument(flag, action=argparse.BooleanOptionalAction, default=f.default, help=help_text)
        else:
            conv = {"int": int, "float": float, "str": str}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            ap.add_argument(flag, type=conv, default=f.default, help=help_text)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return cls(**{f.name: getattr(args, f.name) for f in dataclasses.fields(cls)})


def opt(default, help_text: str):
    return dataclasses.field(default=default, metadata={"help": help_text})


def values(text: str, conv=str) -> list:
    return [conv(v) for v in text.split(",") if v]
