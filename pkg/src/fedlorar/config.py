"""Experiment configuration: a flat ``key = value`` text file.

Keys are namespaced with dots (``algo.kind``, ``model.hidden_dim``), lines
starting with ``#`` are comments, and list values are comma-separated. Every
key is optional; the defaults describe the eight-client run with the server
learning rate 1, server momentum 0.9, FedProx mu 1e-4, 60 rounds and a dev
evaluation every 5 rounds. See ``DEFAULTS`` for the full key list.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .datagen import TEXT2SQL_DEV_SIZES, REPORTED_TEST_SIZES, TEXT2SQL_TRAIN_SIZES, PopulationSpec
from .engine import AlgorithmSpec, WeightingMechanism
from .errors import FedLorarError, InvalidConfig
from .models import ModelSpec
from .optim import ClientOptimizerSpec, ServerOptimizerSpec

PARADIGMS = ("finetune", "centralized", "federated")
TRANSPORTS = ("inproc", "tcp")

DEFAULTS: dict[str, str] = {
    "paradigm": "federated",
    "seed": "0",
    "output_dir": "runs/default",
    "eval_every": "5",
    "transport": "inproc",
    "model.kind": "mlp-1-hidden",
    "model.input_dim": "20",
    "model.hidden_dim": "32",
    "model.num_classes": "5",
    "model.activation": "tanh",
    "population.preset": "text2sql",
    "population.sizes": "",
    "population.dev_sizes": "",
    "population.test_sizes": "",
    "population.label_skew_alpha": "0.3",
    "population.feature_rotation": "",
    "population.max_rotation": "0.3",
    "population.class_sep": "2.0",
    "population.noise_std": "1.0",
    "population.domain_shift": "8.0",
    "population.modes_per_class": "1",
    "population.seed": "",
    "population.data_dir": "",
    "algo.kind": "fedopt",
    "algo.weighting": "size",
    "algo.mu": "0.0001",
    "algo.rounds": "60",
    "algo.local_epochs": "auto",
    "algo.batch_sizes": "auto",
    "client_opt.kind": "sgd",
    "client_opt.learning_rate": "0.05",
    "client_opt.momentum": "0.9",
    "client_opt.beta1": "0.9",
    "client_opt.beta2": "0.999",
    "client_opt.epsilon": "1e-8",
    "server_opt.kind": "auto",
    "server_opt.learning_rate": "1.0",
    "server_opt.momentum": "0.9",
    "server_opt.beta1": "0.9",
    "server_opt.beta2": "0.999",
    "server_opt.epsilon": "1e-8",
    "train.max_epochs": "40",
    "train.batch_size": "16",
    "train.eval_every_epochs": "1",
}


def _ints(text: str) -> tuple[int, ...] | None:
    text = text.strip()
    if not text:
        return None
    return tuple(int(v) for v in text.split(","))


def _floats(text: str) -> tuple[float, ...] | None:
    text = text.strip()
    if not text:
        return None
    return tuple(float(v) for v in text.split(","))


def _per_client(text: str):
    text = text.strip()
    if text in ("", "auto"):
        return None
    values = _ints(text)
    return values[0] if len(values) == 1 else values


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, str]
    paradigm: str
    seed: int
    output_dir: str
    eval_every: int
    transport: str
    model: ModelSpec
    population: PopulationSpec
    algo: AlgorithmSpec
    data_dir: str | None
    max_epochs: int
    batch_size: int
    eval_every_epochs: int

    def to_flat(self) -> dict[str, str]:
        """Settings that determine results (the output location is left out)."""
        return {k: v for k, v in self.values.items() if k != "output_dir"}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))

    def with_overrides(self, **overrides: str) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update({k: str(v) for k, v in overrides.items()})
        return build_config(merged)


def build_config(values: Mapping[str, str]) -> ExperimentConfig:
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(sorted(unknown))}")
    v = dict(DEFAULTS)
    v.update({k: str(x).strip() for k, x in values.items()})
    try:
        seed = int(v["seed"])
        paradigm = v["paradigm"]
        if paradigm not in PARADIGMS:
            raise InvalidConfig(f"paradigm must be one of {PARADIGMS}")
        if v["transport"] not in TRANSPORTS:
            raise InvalidConfig(f"transport must be one of {TRANSPORTS}")
        model = ModelSpec(
            kind=v["model.kind"],
            input_dim=int(v["model.input_dim"]),
            num_classes=int(v["model.num_classes"]),
            hidden_dim=int(v["model.hidden_dim"]) if v["model.kind"] == "mlp-1-hidden" else 0,
            activation=v["model.activation"],
        )
        preset = v["population.preset"]
        if preset == "text2sql":
            sizes, dev, test = TEXT2SQL_TRAIN_SIZES, TEXT2SQL_DEV_SIZES, REPORTED_TEST_SIZES
        elif preset == "custom":
            sizes, dev, test = None, None, None
        else:
            raise InvalidConfig("population.preset must be 'text2sql' or 'custom'")
        sizes = _ints(v["population.sizes"]) or sizes
        if sizes is None:
            raise InvalidConfig("population.sizes is required with population.preset = custom")
        if _ints(v["population.sizes"]) is not None and preset == "text2sql":
            dev, test = None, None
        pop_seed = int(v["population.seed"]) if v["population.seed"] else seed
        population = PopulationSpec(
            sizes=sizes,
            label_skew_alpha=float(v["population.label_skew_alpha"]),
            feature_rotation=_floats(v["population.feature_rotation"]),
            num_classes=model.num_classes,
            input_dim=model.input_dim,
            seed=pop_seed,
            dev_sizes=_ints(v["population.dev_sizes"]) or dev,
            test_sizes=_ints(v["population.test_sizes"]) or test,
            class_sep=float(v["population.class_sep"]),
            noise_std=float(v["population.noise_std"]),
            max_rotation=float(v["population.max_rotation"]),
            domain_shift=float(v["population.domain_shift"]),
            modes_per_class=int(v["population.modes_per_class"]),
        )
        client_opt = ClientOptimizerSpec(
            kind=v["client_opt.kind"],
            learning_rate=float(v["client_opt.learning_rate"]),
            momentum=float(v["client_opt.momentum"]),
            beta1=float(v["client_opt.beta1"]),
            beta2=float(v["client_opt.beta2"]),
            epsilon=float(v["client_opt.epsilon"]),
        )
        server_opt = None
        if v["server_opt.kind"] != "auto":
            server_opt = ServerOptimizerSpec(
                kind=v["server_opt.kind"],
                learning_rate=float(v["server_opt.learning_rate"]),
                momentum=float(v["server_opt.momentum"]),
                beta1=float(v["server_opt.beta1"]),
                beta2=float(v["server_opt.beta2"]),
                epsilon=float(v["server_opt.epsilon"]),
            )
        elif v["algo.kind"] == "fedopt":
            server_opt = ServerOptimizerSpec(
                "sgd-momentum",
                learning_rate=float(v["server_opt.learning_rate"]),
                momentum=float(v["server_opt.momentum"]),
            )
        algo = AlgorithmSpec(
            kind=v["algo.kind"],
            weighting=WeightingMechanism(v["algo.weighting"]),
            mu=float(v["algo.mu"]),
            client_opt=client_opt,
            server_opt=server_opt,
            local_epochs=_per_client(v["algo.local_epochs"]),
            batch_sizes=_per_client(v["algo.batch_sizes"]),
            rounds=int(v["algo.rounds"]),
        )
        for name in ("local_epochs", "batch_sizes"):
            value = getattr(algo, name)
            if isinstance(value, tuple) and len(value) != population.num_clients:
                raise InvalidConfig(f"algo.{name} needs one entry per client")
        cfg = ExperimentConfig(
            values={k: v[k] for k in sorted(v)},
            paradigm=paradigm,
            seed=seed,
            output_dir=v["output_dir"],
            eval_every=int(v["eval_every"]),
            transport=v["transport"],
            model=model,
            population=population,
            algo=algo,
            data_dir=v["population.data_dir"] or None,
            max_epochs=int(v["train.max_epochs"]),
            batch_size=int(v["train.batch_size"]),
            eval_every_epochs=int(v["train.eval_every_epochs"]),
        )
    except InvalidConfig:
        raise
    except (FedLorarError, ValueError, KeyError) as exc:
        raise InvalidConfig(str(exc)) from exc
    if cfg.eval_every < 1 or cfg.max_epochs < 0 or cfg.batch_size < 1 or cfg.eval_every_epochs < 1:
        raise InvalidConfig("eval_every, train.batch_size and train.eval_every_epochs must be positive")
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse config: {exc}") from exc
    return dict(parser["config"])


def load_config(path: str | Path | None = None, **overrides: str) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return build_config(values)
