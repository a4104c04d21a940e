"""Experiment configuration, orchestration and method comparison.

A config is a nested JSON object. Values resolve as
command-line overrides > config file > ``DEFAULT_CONFIG``.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from . import checkpoint
from . import denoiser as dn
from . import diffusion as df
from . import evaluation as ev
from . import unlearn as ul
from .datasets import (
    Dataset, DatasetSplit, ToyDatasetSpec, generate_dataset, split_forget, split_holdout, split_to_dict,
)
from .mathcore import Rng

log = logging.getLogger(__name__)

METHODS = ("unscrubbed", "retrain", "finetune", "neggrad", "blindspot", "so", "ts", "erasediff")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "method": "erasediff",
    "dataset": {"num_classes": 4, "radius": 3.0, "sigma": 0.35, "n_per_class": 2000, "means": None},
    "forget_classes": [2],
    "holdout_fraction": 0.2,
    "rs_fraction": 0.16,
    "schedule": {"T": 200, "beta_1": 5e-4, "beta_T": 0.1},
    "model": {"hidden": [64, 64], "time_dim": 16, "class_dim": 8},
    "training": {"epochs": 400, "batch_size": 128, "lr": 1e-3, "final_lr": 1e-5, "retrain_epochs": 300},
    "loss_weighting": "simplified",
    "cfg": {"w": 0.1, "p_uncond": 0.1},
    "sampler": {"kind": "ddim", "eta": 0.0, "num_steps": 20},
    "unlearn": {"S": 200, "K": 2, "lr": 1e-3, "lam": 0.1, "batch_size_rs": None, "batch_size_f": None},
    "baselines": {
        "epochs": 20, "lr": 1e-3, "batch_size": 128,
        "neggrad_epochs": 5, "neggrad_lr": 3e-4,
        "so_alpha": 0.3,
        "ts_epochs_1": 5, "ts_epochs_2": 20,
        "bs_lam": 0.1, "bs_epochs_r": 20, "bs_epochs_u": 20,
    },
    "eval": {"n_samples": 4000, "n_t": 64, "kl_batch": 256, "reference": "retrain", "classifier_steps": 500},
    "out": None,
    "cache_dir": None,
}

# keys that do not change any computed number
_NON_SEMANTIC = ("out", "cache_dir")


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"unlearn.lam=0.2"`` becomes ``(["unlearn", "lam"], 0.2)``; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    config = copy.deepcopy(config)
    for text in overrides:
        keys, value = parse_override(text)
        node = config
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return config


def make_config(file_config: dict | None = None, overrides: Iterable[str] = (), **flags) -> dict:
    config = _merge(DEFAULT_CONFIG, file_config or {})
    config = apply_overrides(config, overrides)
    for k, v in flags.items():
        if v is not None:
            config = _merge(config, {k: v})
    validate_config(config)
    return config


def load_config(path: str | Path | None, overrides: Iterable[str] = (), **flags) -> dict:
    file_config = json.loads(Path(path).read_text()) if path else {}
    return make_config(file_config, overrides, **flags)


def validate_config(config: dict) -> None:
    if config["method"] not in METHODS:
        raise ConfigError(f"unknown method {config['method']!r}; expected one of {METHODS}")
    C = config["dataset"]["num_classes"]
    fc = config["forget_classes"]
    if not fc or any(not 0 <= int(c) < C for c in fc):
        raise ConfigError("forget_classes must name existing classes")
    if len(set(fc)) >= C:
        raise ConfigError("nothing remains")
    try:
        _dataset_spec(config).validate()
        df.CfgConfig(**config["cfg"])
        df.SamplerConfig(**config["sampler"])
        df.LossWeighting(config["loss_weighting"])
        _unlearn_config(config).validate()
        ul.BaselineConfig(**config["baselines"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(config: dict, keys: Sequence[str] | None = None) -> str:
    """SHA-256 of the canonical JSON of ``config`` (optionally only ``keys``)."""
    sub = {k: v for k, v in config.items() if k not in _NON_SEMANTIC}
    if keys is not None:
        sub = {k: sub[k] for k in keys}
    return hashlib.sha256(json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _dataset_spec(config: dict) -> ToyDatasetSpec:
    d = config["dataset"]
    means = tuple(tuple(m) for m in d["means"]) if d.get("means") else None
    return ToyDatasetSpec(d["num_classes"], d["radius"], d["sigma"], d["n_per_class"], config["seed"], means)


def _unlearn_config(config: dict) -> ul.UnlearnConfig:
    return ul.UnlearnConfig(**config["unlearn"], rs_fraction=config["rs_fraction"])


@dataclass
class Setup:
    """Everything derived from a config before any method runs."""
    config: dict
    schedule: df.NoiseSchedule
    cfg: df.CfgConfig
    sampler: df.SamplerConfig
    weighting: df.LossWeighting
    train_set: Dataset
    holdout: Dataset
    split: DatasetSplit
    rng: Rng

    @property
    def num_classes(self) -> int:
        return self.config["dataset"]["num_classes"]

    def init_params(self, key: str) -> dn.DenoiserParams:
        m = self.config["model"]
        return dn.init_params(self.rng.spawn("init", key), self.train_set.dim, self.num_classes,
                              self.schedule.T, m["hidden"], m["time_dim"], m["class_dim"])


def build_setup(config: dict) -> Setup:
    seed = int(config["seed"])
    data = generate_dataset(_dataset_spec(config))
    train_set, holdout = split_holdout(data, config["holdout_fraction"], seed)
    split = split_forget(train_set, config["forget_classes"], config["rs_fraction"], seed)
    sc = config["schedule"]
    return Setup(
        config=config,
        schedule=df.linear_schedule(sc["T"], sc["beta_1"], sc["beta_T"]),
        cfg=df.CfgConfig(**config["cfg"]),
        sampler=df.SamplerConfig(**config["sampler"]),
        weighting=df.LossWeighting(config["loss_weighting"]),
        train_set=train_set, holdout=holdout, split=split, rng=Rng(seed),
    )


# in-process cache of trained references, keyed by config hash
_MODEL_CACHE: dict[str, ul.MethodResult] = {}

_BASE_KEYS = ("seed", "dataset", "holdout_fraction", "schedule", "model", "training", "loss_weighting", "cfg")
_RETRAIN_KEYS = _BASE_KEYS + ("forget_classes", "rs_fraction")


def _cached(setup: Setup, kind: str, keys: Sequence[str], build) -> ul.MethodResult:
    key = f"{kind}-{config_hash(setup.config, keys)}"
    if key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    cache_dir = setup.config.get("cache_dir")
    path = Path(cache_dir) / f"{key}.json" if cache_dir else None
    if path is not None and path.exists():
        params, _, _, meta = checkpoint.load(path)
        result = ul.MethodResult(params, meta.get("trace", {}), meta.get("grad_steps", 0))
    else:
        result = build()
        if path is not None:
            checkpoint.save(path, result.params, setup.schedule, setup.config["seed"],
                            {"trace": result.trace, "grad_steps": result.grad_steps, "kind": kind})
    _MODEL_CACHE[key] = result
    return result


def train_unscrubbed(setup: Setup) -> ul.MethodResult:
    """The well-trained starting model on all training data (cached)."""
    tr = setup.config["training"]

    def build():
        init = setup.init_params("unscrubbed")
        res = df.train(init, setup.train_set.x, setup.train_set.y, setup.schedule, setup.weighting,
                       setup.cfg, tr["epochs"], tr["batch_size"], dn.adam_init(init, tr["lr"]),
                       setup.rng.spawn("train", "unscrubbed"), final_lr=tr["final_lr"])
        return ul.MethodResult(res.params, {"loss": res.losses}, res.grad_steps)

    return _cached(setup, "unscrubbed", _BASE_KEYS, build)


def train_retrain(setup: Setup) -> ul.MethodResult:
    """From-scratch training on the remaining data (cached); never sees the starting model."""
    tr = setup.config["training"]

    def build():
        init = setup.init_params("retrain")
        res = df.train(init, setup.split.remain.x, setup.split.remain.y, setup.schedule, setup.weighting,
                       setup.cfg, tr["retrain_epochs"], tr["batch_size"], dn.adam_init(init, tr["lr"]),
                       setup.rng.spawn("train", "retrain"), final_lr=tr["final_lr"])
        return ul.MethodResult(res.params, {"loss": res.losses}, res.grad_steps)

    return _cached(setup, "retrain", _RETRAIN_KEYS, build)


def run_method(setup: Setup, method: str, theta0: dn.DenoiserParams | None = None) -> ul.MethodResult:
    if method == "unscrubbed":
        return train_unscrubbed(setup)
    if method == "retrain":
        return train_retrain(setup)
    theta0 = train_unscrubbed(setup).params if theta0 is None else theta0
    s, cfg, w = setup.schedule, setup.cfg, setup.weighting
    sp = setup.split
    b = ul.BaselineConfig(**setup.config["baselines"])
    rng = setup.rng.spawn("method", method)
    if method == "erasediff":
        return ul.erasediff(theta0, sp.remain, sp.forget, _unlearn_config(setup.config), s, cfg, rng,
                            remain_subset=sp.remain_subset, weighting=w)
    if method == "finetune":
        return ul.finetune(theta0, sp.remain, b.epochs, b.lr, b.batch_size, s, cfg, rng, w)
    if method == "neggrad":
        return ul.neggrad(theta0, sp.forget, b.neggrad_epochs, b.neggrad_lr, b.batch_size, s, cfg, rng, w)
    if method == "so":
        return ul.simultaneous(theta0, sp.remain, sp.forget, b.so_alpha, b.epochs, b.lr, b.batch_size,
                               s, cfg, rng, w)
    if method == "ts":
        return ul.two_step(theta0, sp.forget, sp.remain, b.ts_epochs_1, b.ts_epochs_2, b.neggrad_lr, b.lr,
                           b.batch_size, s, cfg, rng, w)
    if method == "blindspot":
        data = setup.train_set
        mask = np.isin(data.y, sp.forget_classes)
        return ul.blindspot(theta0, data, mask, setup.init_params("blind"), b.bs_epochs_r, b.bs_epochs_u,
                            b.bs_lam, b.lr, b.batch_size, s, cfg, rng, w)
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class Evaluation:
    report: ev.MetricsReport
    samples: dict[int, np.ndarray]
    losses_forget: np.ndarray
    losses_unseen: np.ndarray
    kl_forget_batches: np.ndarray
    kl_remain_batches: np.ndarray


_CLASSIFIERS: dict[str, ev.ToyClassifier] = {}


def toy_classifier(setup: Setup) -> ev.ToyClassifier:
    key = config_hash(setup.config, ("seed", "dataset", "holdout_fraction", "eval"))
    if key not in _CLASSIFIERS:
        _CLASSIFIERS[key] = ev.train_toy_classifier(
            setup.train_set.x, setup.train_set.y, steps=setup.config["eval"]["classifier_steps"])
    return _CLASSIFIERS[key]


def evaluate(setup: Setup, params: dn.DenoiserParams, reference: dn.DenoiserParams | None = None,
             metadata: dict | None = None) -> Evaluation:
    """Run the full metric battery on ``params``.

    Every random draw comes from ``Rng(seed).spawn("eval", ...)``, so two
    models evaluated under one config see identical noise.
    """
    e = setup.config["eval"]
    s, sp = setup.schedule, setup.split
    rng = setup.rng.spawn("eval")
    clf = toy_classifier(setup)
    fc = set(sp.forget_classes)
    energy, samples, acc = {}, {}, {}
    for c in range(setup.num_classes):
        a, xs = ev.conditional_accuracy(params, clf, s, setup.sampler, setup.cfg, c, e["n_samples"],
                                        rng.spawn("sample", c), return_samples=True)
        samples[c], acc[c] = xs, a
        energy[c] = ev.energy_distance(xs, setup.train_set.of_class(c).x)
    forget_acc = float(np.mean([acc[c] for c in sorted(fc)]))
    remain_acc = float(np.mean([acc[c] for c in range(setup.num_classes) if c not in fc]))

    unseen = setup.holdout.subset(np.isin(setup.holdout.y, sorted(fc)))
    l_f = ev.per_sample_diffusion_loss(params, sp.forget.x, sp.forget.y, s, e["n_t"], rng.spawn("mia", "forget"))
    l_u = ev.per_sample_diffusion_loss(params, unseen.x, unseen.y, s, e["n_t"], rng.spawn("mia", "unseen"))
    kl_f = ev.batch_kl_values(params, sp.forget.x, sp.forget.y, s, rng.spawn("kl", "forget"), e["kl_batch"])
    kl_r = ev.batch_kl_values(params, sp.remain.x, sp.remain.y, s, rng.spawn("kl", "remain"), e["kl_batch"])
    report = ev.build_report(
        energy_distance=energy,
        forget_accuracy=forget_acc,
        remain_accuracy=remain_acc,
        mia_auc=ev.mia_auc(l_f, l_u),
        kl_forget=float(kl_f.mean()),
        kl_remain=float(kl_r.mean()),
        weight_distance=None if reference is None else ev.weight_distance(params, reference),
        metadata=dict(metadata or {}, class_accuracy={str(k): v for k, v in acc.items()}),
    )
    return Evaluation(report, samples, l_f, l_u, kl_f, kl_r)


@dataclass
class RunRecord:
    config_hash: str
    version: str
    method: str
    seed: int
    status: str
    wall_clock_s: float
    grad_steps: int
    reference_grad_steps: int | None
    report: ev.MetricsReport | None
    paths: dict[str, str] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = None if self.report is None else asdict(self.report)
        return d


def trace_csv(result: ul.MethodResult) -> str:
    """Per-iteration trace; EraseDiff columns are iteration, remaining_loss, forget_loss, f_hat."""
    tr = result.trace
    preferred = ["remaining_loss", "forget_loss", "f_hat"]
    cols = [c for c in preferred if c in tr] + sorted(c for c in tr if c not in preferred and tr[c])
    n = max((len(tr[c]) for c in cols), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *cols])
    for i in range(n):
        w.writerow([i] + [repr(tr[c][i]) if i < len(tr[c]) else "" for c in cols])
    return buf.getvalue()


def run_experiment(config: dict, write: bool = True, plots: bool = True) -> RunRecord:
    """Build data, obtain the starting model, run the method, evaluate and persist.

    A failing stage marks the record ``failed``; artifacts written before the
    failure are kept.
    """
    start = time.perf_counter()
    method = config["method"]
    out = Path(config["out"]) if (write and config.get("out")) else None
    paths: dict[str, str] = {}
    record = RunRecord(config_hash(config), __version__, method, int(config["seed"]), "failed", 0.0, 0, None, None)
    try:
        setup = build_setup(config)
        result = run_method(setup, method)
        record.grad_steps = result.grad_steps
        reference = None
        if config["eval"]["reference"] == "retrain":
            ref = train_retrain(setup)
            reference = ref.params
            record.reference_grad_steps = ref.grad_steps
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "split.json").write_text(json.dumps(split_to_dict(setup.split)))
            paths["split"] = str(out / "split.json")
            paths["checkpoint"] = str(checkpoint.save(out / "checkpoint.json", result.params, setup.schedule,
                                                      config["seed"], {"method": method, "config": config}))
            (out / "trace.csv").write_text(trace_csv(result))
            paths["trace"] = str(out / "trace.csv")
        evaluation = evaluate(setup, result.params, reference,
                              {"seed": config["seed"], "method": method, "config_hash": record.config_hash})
        record.report = evaluation.report
        if out is not None:
            (out / "report.json").write_text(evaluation.report.to_json())
            paths["report"] = str(out / "report.json")
            if plots:
                from .plots import emit_plots
                paths.update(emit_plots(evaluation, setup, out))
        record.status = "ok"
    except Exception as exc:  # recorded, not raised: partial artifacts stay on disk
        log.exception("run failed")
        record.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    record.wall_clock_s = time.perf_counter() - start
    record.paths = paths
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return record


TABLE_COLUMNS = ("method", "forget_energy", "forget_accuracy", "remain_energy_mean", "remain_energy_max",
                 "remain_accuracy", "mia_auc", "kl_forget", "kl_remain", "wd_to_retrain", "grad_steps")


def _split_key(config: dict) -> str:
    return config_hash(config, ("seed", "dataset", "holdout_fraction", "forget_classes", "rs_fraction"))


def compare_methods(configs: Sequence[dict]) -> tuple[list[dict], list[RunRecord]]:
    """One row per config, in the given order. All configs must share data, split and seed."""
    if not configs:
        return [], []
    key = _split_key(configs[0])
    if any(_split_key(c) != key for c in configs):
        raise ConfigError("configs do not share the same dataset/split/seed")
    rows, records = [], []
    for config in configs:
        rec = run_experiment(config)
        records.append(rec)
        if rec.report is None:
            rows.append({"method": config["method"], "status": "failed"})
            continue
        r = rec.report
        fc = {str(c) for c in config["forget_classes"]}
        remain_ed = [v for k, v in r.energy_distance.items() if k not in fc]
        rows.append({
            "method": config["method"],
            "forget_energy": float(np.mean([r.energy_distance[k] for k in sorted(fc)])),
            "forget_accuracy": r.forget_accuracy,
            "remain_energy_mean": float(np.mean(remain_ed)),
            "remain_energy_max": float(np.max(remain_ed)),
            "remain_accuracy": r.remain_accuracy,
            "mia_auc": r.mia_auc,
            "kl_forget": r.kl_forget,
            "kl_remain": r.kl_remain,
            "wd_to_retrain": r.weight_distance,
            "grad_steps": rec.grad_steps,
        })
    return rows, records


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def table_text(rows: Sequence[dict]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [list(TABLE_COLUMNS)] + [[fmt(r.get(c)) for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(v.rjust(w) if j else v.ljust(w) for j, (v, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
