"""Training loop, ablation grid and configuration handling.

Each training step alternates two phases on two independently drawn batches:
a discriminative phase (class triplets on ``phi``) and a shared phase
(inter-class or group triplets on ``phi_star``, or on ``phi`` when a single
encoder is used).  In ``both_sep_decor`` mode each phase also subtracts the
decorrelation term, recomputed on that phase's own batch.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from . import evaluation, grouping as grouping_mod, sampling
from .dataset import Dataset, SynthConfig, generate_synthetic, load_dataset, split_by_class
from .errors import ConfigError, TrainingDivergenceError
from .losses import LossConfig
from .model import (
    ModelDims,
    OptimizerState,
    backward,
    embed_inputs,
    forward_loss,
    init_params,
    optimizer_step,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
MODES = ("discr_only", "shared_only", "both_single", "both_sep", "both_sep_decor")
SEPARATE_MODES = ("both_sep", "both_sep_decor")
GROUP_STRATEGIES = ("group", "group_std")
DEFAULT_DECOR_GAMMA = 1.0


@dataclass
class ExperimentConfig:
    dataset: Union[SynthConfig, str] = field(default_factory=SynthConfig)
    feature_dim: int = 32
    embed_dim: int = 16
    embed_star_dim: int = 16
    reg_hidden: Optional[int] = None
    f_hidden: tuple = (64, 64)
    mode: str = "both_sep_decor"
    shared_strategy: str = "interclass"
    negative_strategy: str = "distance_weighted"
    clamp_low: float = 0.5
    weight_cap: float = 0.9
    loss_kind: str = "triplet"
    alpha: float = 0.2
    beta: float = 0.6
    learn_beta: bool = False
    gamma: Optional[float] = None
    epochs: int = 20
    batch_size: int = 40
    m: int = 4
    learning_rate: float = 1e-3
    regressor_lr: Optional[float] = None
    seeds: tuple = (0,)
    group_L: Optional[int] = None
    group_every: int = 2
    recall_ks: tuple = (1, 2, 4, 8)
    nmi_restarts: int = 10
    nmi_schedule: str = "final"

    @property
    def effective_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return DEFAULT_DECOR_GAMMA if self.mode == "both_sep_decor" else 0.0

    @property
    def use_std(self) -> bool:
        return self.shared_strategy == "group_std"

    @property
    def separate(self) -> bool:
        return self.mode in SEPARATE_MODES

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss_kind, self.alpha, self.beta, self.learn_beta, self.effective_gamma)

    def sampler_config(self) -> sampling.SamplerConfig:
        return sampling.SamplerConfig(
            self.negative_strategy, self.shared_strategy, self.clamp_low, self.weight_cap
        )

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if not self.seeds:
            raise ConfigError("seeds", "must be non-empty")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not self.batch_size >= self.m >= 1:
            raise ConfigError("batch_size", "need batch_size >= m >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.group_every < 1:
            raise ConfigError("group_every", "must be >= 1")
        if self.group_L is not None and self.group_L < 1:
            raise ConfigError("group_L", "must be >= 1")
        if self.nmi_schedule not in ("every_epoch", "final", "never"):
            raise ConfigError("nmi_schedule", "must be every_epoch, final or never")
        if self.mode != "both_sep_decor" and self.effective_gamma != 0:
            raise ConfigError("gamma", f"mode {self.mode} has no decorrelation term")
        if isinstance(self.dataset, SynthConfig):
            self.dataset.validate()
        self.loss_config().validate()
        self.sampler_config().validate()
        ModelDims(1, self.feature_dim, self.embed_dim, self.embed_star_dim, self.reg_hidden, self.f_hidden)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {"version": CONFIG_VERSION}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, SynthConfig):
            value = dataclasses.asdict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version}")
    data.pop("ablation", None)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    ds = data.get("dataset")
    if isinstance(ds, dict):
        synth_keys = {f.name for f in dataclasses.fields(SynthConfig)}
        bad = sorted(set(ds) - synth_keys)
        if bad:
            raise ConfigError(f"dataset.{bad[0]}", "unknown key")
        data["dataset"] = SynthConfig(**ds)
    elif ds is not None and not isinstance(ds, str):
        raise ConfigError("dataset", "must be a mapping of generator settings or a path")
    for key in ("f_hidden", "seeds", "recall_ks"):
        if key in data:
            data[key] = tuple(data[key])
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def load_config(path) -> tuple:
    """Read a YAML config; returns ``(ExperimentConfig, ablation_variants)``."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    variants = data.get("ablation", [])
    cfg = config_from_dict(data)
    if isinstance(cfg.dataset, str) and not Path(cfg.dataset).is_absolute():
        cfg = cfg.replace(dataset=str(Path(path).parent / cfg.dataset))
    return cfg, variants


def prepare_data(cfg: ExperimentConfig) -> tuple:
    if isinstance(cfg.dataset, SynthConfig):
        ds = generate_synthetic(cfg.dataset)
    else:
        ds = load_dataset(cfg.dataset)
    return split_by_class(ds)


@dataclass
class MetricsLog:
    """Flat metric rows ``(epoch, split, representation, metric, value)``."""

    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_params: object = None
    grouping: object = None

    def add(self, epoch, split, representation, metric, value):
        if self.rows and epoch < self.rows[-1][0]:
            raise ValueError("epochs must not decrease")
        self.rows.append((int(epoch), split, representation, metric, float(value)))

    def extend(self, reports):
        for r in reports:
            for row in r.rows():
                self.add(*row)

    def value(self, epoch, split, representation, metric):
        for row in self.rows:
            if row[:4] == (epoch, split, representation, metric):
                return row[4]
        raise KeyError((epoch, split, representation, metric))

    def series(self, split, representation, metric) -> dict:
        return {r[0]: r[4] for r in self.rows if r[1:4] == (split, representation, metric)}

    @property
    def last_epoch(self) -> int:
        return self.rows[-1][0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "split", "representation", "metric", "value"])
        for epoch, split, rep, metric, value in self.rows:
            writer.writerow([epoch, split, rep, metric, repr(value)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        log = cls()
        reader = csv.reader(io.StringIO(text))
        next(reader)
        for epoch, split, rep, metric, value in reader:
            log.add(int(epoch), split, rep, metric, float(value))
        return log


def representations_for(mode: str) -> tuple:
    if mode in SEPARATE_MODES:
        return ("phi", "phi_star", "concat", "features_f")
    return ("phi", "features_f")


def primary_representation(mode: str) -> str:
    return "concat" if mode in SEPARATE_MODES else "phi"


class Trainer:
    """Holds the single mutable copy of the model for one seeded run."""

    def __init__(self, cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset):
        self.cfg = cfg
        self.seed = seed
        self.train = train
        self.test = test
        streams = np.random.SeedSequence(seed).spawn(4)
        self.batch_rng = np.random.default_rng(streams[0])
        self.sample_rng = np.random.default_rng(streams[1])
        self.group_rng = np.random.default_rng(streams[2])
        init_seed = int(streams[3].generate_state(1)[0])
        dims = ModelDims(
            train.ambient_dim,
            cfg.feature_dim,
            cfg.embed_dim,
            cfg.embed_star_dim,
            cfg.reg_hidden,
            cfg.f_hidden,
        )
        self.params = init_params(dims, init_seed, cfg.beta)
        overrides = {"p.": cfg.regressor_lr} if cfg.regressor_lr else {}
        self.opt = OptimizerState(lr=cfg.learning_rate, lr_overrides=overrides)
        self.loss_cfg = cfg.loss_config()
        self.sampler_cfg = cfg.sampler_config()
        self.grouping = None
        self.shared_head = "shared" if cfg.separate else "class"

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train) / self.cfg.batch_size)

    def _batch(self):
        return sampling.build_batch(self.train.labels, self.cfg.batch_size, self.cfg.m, self.batch_rng)

    def _step(self, X, triplets: sampling.TripletSet, head: str) -> tuple:
        decor = self.cfg.mode == "both_sep_decor"
        tape = forward_loss(self.params, X, triplets.as_array(), head, self.loss_cfg, decor)
        if not math.isfinite(tape.loss):
            raise TrainingDivergenceError("non-finite loss", self.params)
        grads = backward(self.params, tape)
        self.params, self.opt = optimizer_step(self.params, grads, self.opt)
        return tape.ranking, tape.r

    def discriminative_phase(self) -> tuple:
        batch = self._batch()
        X = self.train.features[batch.indices]
        E = embed_inputs(self.params, X, "class")
        triplets = sampling.sample_discriminative_triplets(batch, E, self.sampler_cfg, self.sample_rng)
        return self._step(X, triplets, "class")

    def shared_phase(self) -> tuple:
        batch = self._batch()
        X = self.train.features[batch.indices]
        E = embed_inputs(self.params, X, self.shared_head)
        if self.cfg.shared_strategy in GROUP_STRATEGIES:
            triplets = sampling.sample_group_triplets(
                batch, self.grouping, E, self.sampler_cfg, self.sample_rng
            )
        else:
            triplets = sampling.sample_interclass_triplets(batch, E, self.sampler_cfg, self.sample_rng)
        return self._step(X, triplets, self.shared_head)

    def regroup(self) -> None:
        L = self.cfg.group_L or self.train.class_ids.size
        self.grouping = grouping_mod.recompute_groups(
            self.params, self.train, L, self.cfg.use_std, self.group_rng
        )

    def evaluate(self, epoch: int, final: bool) -> list:
        cfg = self.cfg
        nmi_now = cfg.nmi_schedule == "every_epoch" or (final and cfg.nmi_schedule == "final")
        restarts = cfg.nmi_restarts if nmi_now else 0
        reps = representations_for(cfg.mode)
        reports = []
        for split, ds in (("train", self.train), ("test", self.test)):
            reports += evaluation.evaluate(
                self.params,
                ds,
                split,
                reps,
                epoch,
                cfg.recall_ks,
                restarts,
                shared_recall=split == "test",
                seed=self.seed,
            )
        return reports


def run_training(cfg: ExperimentConfig, seed: Optional[int] = None, data=None):
    """Train one model; returns ``(final_params, MetricsLog)``.

    The log's ``best_params`` hold the parameters with the highest test
    Recall@1 of the mode's primary representation.
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    train, test = data if data is not None else prepare_data(cfg)
    uses_groups = cfg.shared_strategy in GROUP_STRATEGIES and cfg.mode != "discr_only"
    if cfg.mode != "discr_only" and not uses_groups and cfg.shared_strategy != "unconstrained":
        if train.class_ids.size < 3:
            raise ConfigError("shared_strategy", "inter-class triplets need >= 3 training classes")

    trainer = Trainer(cfg, seed, train, test)
    log = MetricsLog()
    primary = primary_representation(cfg.mode)
    best = -1.0
    if uses_groups:
        trainer.regroup()

    for epoch in range(1, cfg.epochs + 1):
        sums = {"l_discr": [], "l_inter": [], "r": []}
        try:
            for _ in range(trainer.steps_per_epoch):
                if cfg.mode != "shared_only":
                    ranking, r = trainer.discriminative_phase()
                    sums["l_discr"].append(ranking - trainer.loss_cfg.gamma * r)
                    sums["r"].append(r)
                if cfg.mode != "discr_only":
                    ranking, r = trainer.shared_phase()
                    sums["l_inter"].append(ranking - trainer.loss_cfg.gamma * r)
                    sums["r"].append(r)
        except (TrainingDivergenceError, FloatingPointError) as exc:
            raise TrainingDivergenceError(
                f"epoch {epoch}: {exc}", log.best_params or trainer.params
            ) from exc

        for name in ("l_discr", "l_inter"):
            if sums[name]:
                log.add(epoch, "train", "loss", name, np.mean(sums[name]))
        if cfg.mode == "both_sep_decor":
            log.add(epoch, "train", "loss", "r", np.mean(sums["r"]))
        if uses_groups:
            log.add(
                epoch,
                "train",
                "grouping",
                "unique_classes_per_group",
                grouping_mod.unique_classes_per_group(trainer.grouping, train.labels),
            )
        reports = trainer.evaluate(epoch, final=epoch == cfg.epochs)
        log.extend(reports)
        score = log.value(epoch, "test", primary, "recall@1")
        if score > best:
            best = score
            log.best_epoch = epoch
            log.best_params = trainer.params.copy()
        if uses_groups and epoch % cfg.group_every == 0 and epoch < cfg.epochs:
            trainer.regroup()

    log.grouping = trainer.grouping
    return trainer.params, log


ABLATION_REPRESENTATIONS = ("phi", "phi_star", "concat", "features_f", "phi_reinit")


def final_metrics(params, cfg: ExperimentConfig, train: Dataset, test: Dataset, seed: int) -> dict:
    """Metrics of a trained model on every representation, keyed by (representation, metric)."""
    out = {}
    restarts = cfg.nmi_restarts if cfg.nmi_schedule != "never" else 0
    for rep in ABLATION_REPRESENTATIONS:
        tr = evaluation.evaluate(params, train, "train", [rep], ks=(1,), seed=seed)[0]
        te = evaluation.evaluate(
            params, test, "test", [rep], ks=(1,), nmi_restarts=restarts, shared_recall=True, seed=seed
        )[0]
        out[(rep, "train_recall@1")] = tr.recall_at[1]
        out[(rep, "test_recall@1")] = te.recall_at[1]
        out[(rep, "gap")] = evaluation.generalization_gap(tr.recall_at[1], te.recall_at[1])
        if te.nmi is not None:
            out[(rep, "test_nmi")] = te.nmi
        if "shared_recall@1" in te.extra:
            out[(rep, "test_shared_recall@1")] = te.extra["shared_recall@1"]
    return out


def _run_variant_seed(args):
    name, cfg, seed = args
    data = prepare_data(cfg)
    params, _ = run_training(cfg, seed, data)
    return name, seed, final_metrics(params, cfg, data[0], data[1], seed)


def _worker_count() -> int:
    env = os.environ.get("SHARED_DML_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)
    # per-seed metrics: {variant: {seed: {(rep, metric): value}}}
    runs: dict = field(default_factory=dict)

    HEADER = ("variant", "representation", "metric", "mean", "std", "n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for variant, rep, metric, mean, std, n in self.rows:
            writer.writerow([variant, rep, metric, repr(mean), repr(std), n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != cls.HEADER:
            raise ValueError(f"unexpected ablation header {header}")
        rows = [(v, r, m, float(mu), float(sd), int(n)) for v, r, m, mu, sd, n in reader]
        return cls(rows)

    def mean(self, variant, representation, metric) -> float:
        for row in self.rows:
            if row[:3] == (variant, representation, metric):
                return row[3]
        raise KeyError((variant, representation, metric))

    def variants(self) -> list:
        return list(dict.fromkeys(r[0] for r in self.rows))


def _variant_list(variants) -> list:
    out = []
    for v in variants:
        if isinstance(v, str):
            out.append((v, {"mode": v}))
        elif isinstance(v, tuple):
            out.append(v)
        else:
            overrides = dict(v)
            name = overrides.pop("name", None) or ",".join(f"{k}={overrides[k]}" for k in sorted(overrides))
            out.append((name, overrides))
    return out


def run_ablation(base_cfg: ExperimentConfig, variants, workers: Optional[int] = None) -> AblationTable:
    """Run every variant over every seed of ``base_cfg``.

    ``variants`` holds mode names, ``(name, overrides)`` pairs or mappings
    of config overrides with an optional ``name`` key.
    """
    variants = _variant_list(variants)
    if len(variants) < 2:
        raise ValueError("an ablation needs at least two variants")
    jobs = []
    for name, overrides in variants:
        cfg = base_cfg.replace(**overrides)
        cfg.validate()
        jobs += [(name, cfg, seed) for seed in cfg.seeds]

    workers = workers or _worker_count()
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant_seed, jobs))
    else:
        results = [_run_variant_seed(job) for job in jobs]

    table = AblationTable()
    for name, seed, metrics in results:
        table.runs.setdefault(name, {})[seed] = metrics
    for name, _ in variants:
        per_seed = list(table.runs[name].values())
        for key in per_seed[0]:
            values = np.array([m[key] for m in per_seed])
            table.rows.append((name, key[0], key[1], float(values.mean()), float(values.std()), len(values)))
    return table
