"""JSON checkpoints.

Layout::

    {
      "format": "diffunlearn-checkpoint/1",
      "layer_sizes": [26, 64, 64, 2],
      "num_classes": 4, "class_dim": 8, "time_dim": 16, "num_timesteps": 200,
      "shapes": [[26, 64], [64], ...],      # flatten order: W0, b0, ..., class_embed
      "params": [...],                      # flattened float64 values
      "schedule": {"T": 200, "beta_1": ..., "beta_T": ..., "mode": "linear"},
      "schedule_sha256": "...",
      "seed": 0,
      "meta": {...}
    }

Floats are written with ``repr`` precision, so loading is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import denoiser as dn
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, schedule_from_dict

FORMAT = "diffunlearn-checkpoint/1"


def to_dict(params: DenoiserParams, schedule: NoiseSchedule, seed: int, meta: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "layer_sizes": params.layer_sizes,
        "num_classes": params.num_classes,
        "class_dim": params.class_dim,
        "time_dim": params.time_dim,
        "num_timesteps": params.num_timesteps,
        "shapes": [list(a.shape) for a in params.arrays()],
        "params": dn.flatten(params).tolist(),
        "schedule": schedule.to_dict(),
        "schedule_sha256": schedule.digest(),
        "seed": int(seed),
        "meta": meta or {},
    }


def from_dict(d: dict) -> tuple[DenoiserParams, NoiseSchedule, int, dict]:
    if d.get("format") != FORMAT:
        raise ValueError(f"not a checkpoint of format {FORMAT}")
    schedule = schedule_from_dict(d["schedule"])
    if schedule.digest() != d["schedule_sha256"]:
        raise ValueError("schedule hash mismatch")
    vec = np.asarray(d["params"], dtype=np.float64)
    arrays, pos = [], 0
    for shape in d["shapes"]:
        n = int(np.prod(shape))
        arrays.append(vec[pos:pos + n].reshape(shape).copy())
        pos += n
    if pos != len(vec):
        raise ValueError("parameter vector length does not match shapes")
    L = (len(arrays) - 1) // 2
    params = DenoiserParams(
        weights=arrays[0:2 * L:2], biases=arrays[1:2 * L:2], class_embed=arrays[-1],
        num_timesteps=int(d["num_timesteps"]), time_dim=int(d["time_dim"]),
    )
    if params.layer_sizes != list(d["layer_sizes"]):
        raise ValueError("layer sizes do not match shapes")
    return params, schedule, int(d["seed"]), d.get("meta", {})


def save(path, params: DenoiserParams, schedule: NoiseSchedule, seed: int, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(params, schedule, seed, meta)))
    return path


def load(path) -> tuple[DenoiserParams, NoiseSchedule, int, dict]:
    return from_dict(json.loads(Path(path).read_text()))
