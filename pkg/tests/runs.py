"""Desk-scale training runs shared by the acceptance and training-curve tests.

Each run trains once per pytest session. Set BASED_RUN_DIR to keep the
outputs after the session ends.
"""

import os
import tempfile
import time
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from based.config import desk_preset
from based.data import Dataset
from based.synthetic import SyntheticSceneSpec, generate_synthetic
from based.training import TrainResult, run_training

SCENES = {"rigid": dict(amplitude=0.0), "deformable": dict(amplitude=0.03)}


@dataclass
class DeskRun:
    dataset: Dataset
    out: Path
    result: TrainResult
    seconds: float


@lru_cache(maxsize=None)
def run_root() -> Path:
    root = os.environ.get("BASED_RUN_DIR")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return Path(tempfile.mkdtemp(prefix="based-runs-"))


@lru_cache(maxsize=None)
def desk_scene(kind: str):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # the rigid scene warns that it is static
        return generate_synthetic(SyntheticSceneSpec(**SCENES[kind]), np.random.default_rng(0),
                                  out_dir=run_root() / f"scene_{kind}")


@lru_cache(maxsize=None)
def desk_run(kind: str, overrides: tuple = ()) -> DeskRun:
    ds, _ = desk_scene(kind)
    cfg = desk_preset().apply_overrides(list(overrides))
    tag = "_".join([kind, *[o.replace("=", "-") for o in overrides]])
    out = run_root() / tag
    t0 = time.perf_counter()
    res = run_training(ds, cfg, 0, out_dir=out)
    return DeskRun(ds, out, res, time.perf_counter() - t0)
