"""Flat ``key=value`` run configuration, presets and ablation switches."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .data.synthetic import SyntheticSpec
from .errors import ConfigError, ParseError
from .losses import LAYERS, LossConfig
from .model import DESK_DIMS, FULL_DIMS, ModelConfig
from .trainer import TrainingConfig

SEED_ENV = "MULE_SEED"


@dataclass(frozen=True)
class Key:
    default: Any
    kind: type
    doc: str


def _k(default, doc, kind=None):
    return Key(default, kind or type(default), doc)


# Defaults are the full-scale values; ``desk`` overrides a subset.
KEYS: dict[str, Key] = {
    "seed": _k(0, "master seed (data, init, sampling)"),
    # synthetic data
    "languages": _k("en,de", "comma-separated language codes"),
    "concepts": _k(3, "number of image concepts"),
    "attributes": _k(10, "size of the shared attribute pool"),
    "attributes_per_image": _k(2, "attributes attached to each image"),
    "bank_size": _k(3, "surface words per concept or attribute, per language"),
    "distractors": _k(20, "distractor words per language"),
    "tokens_per_sentence": _k(6, "tokens per generated sentence"),
    "sentences_per_lang": _k(2, "sentences per image and language"),
    "sigma": _k(0.05, "image feature noise"),
    "distractor_rate": _k(0.2, "probability a token is replaced by a distractor"),
    "img_dim": _k(2048, "image feature dimension"),
    "n_train": _k(29000, "training images"),
    "n_val": _k(1014, "validation images"),
    "n_test": _k(1000, "test images"),
    "reduce_lang": _k("", "language whose training sentences are subsampled (empty: none)"),
    "reduce_fraction": _k(1.0, "fraction of reduce_lang training sentences kept"),
    "translate_src": _k("en", "source language for simulated translation"),
    "translate_dst": _k("de", "target language for simulated translation"),
    "translate_p": _k(0.1, "per-token corruption rate of simulated translation"),
    # model
    "d_w": _k(FULL_DIMS["d_w"], "word embedding size"),
    "d_u": _k(FULL_DIMS["d_u"], "universal embedding size"),
    "d_h": _k(FULL_DIMS["d_h"], "LSTM hidden size"),
    "d_m": _k(FULL_DIMS["d_m"], "multimodal embedding size"),
    # optimization
    "lr0": _k(1e-4, "initial learning rate"),
    "gamma": _k(0.95, "per-epoch learning-rate decay"),
    "epochs": _k(20, "fine-tuning epochs"),
    "batch_size": _k(450, "images per minibatch"),
    "steps_per_epoch": _k(0, "minibatches per epoch (0: one pass over the training images)"),
    "beta1": _k(0.9, "Adam beta1"),
    "beta2": _k(0.999, "Adam beta2"),
    "eps": _k(1e-8, "Adam epsilon"),
    "embed_l2": _k(5e-7, "weight of the word-embedding anchor penalty"),
    "pretrain_epochs": _k(5, "universal-space pretraining epochs"),
    "pretrain_lr": _k(0.0, "pretraining learning rate (0: same as lr0)"),
    "sampler_style": _k("multi30k", "minibatch style: uniform, multi30k or mscoco-groups"),
    # losses
    "margin": _k(0.05, "triplet margin"),
    "lambda1": _k(1.0, "neighborhood weight"),
    "lambda2": _k(1e-6, "language classifier weight"),
    "lambda3": _k(1.0, "matching weight"),
    "top_k": _k(10, "violated triplets kept per loss term"),
    # ablation switches
    "nc": _k(True, "universal-layer neighborhood term on"),
    "lc": _k(True, "adversarial language classifier on"),
    "lp": _k(True, "universal-space pretraining on"),
    "parallel": _k(False, "separate encoder per language"),
    "translate": _k(False, "train on machine-translated sentences"),
    "trans_only": _k(False, "drop human sentences of translate_dst, keep machine ones"),
}

PRESETS: dict[str, dict[str, Any]] = {
    "fullscale": {},
    "desk": {
        "img_dim": DESK_DIMS["d_img"], "n_train": 200, "n_val": 50, "n_test": 100,
        "d_w": DESK_DIMS["d_w"], "d_u": DESK_DIMS["d_u"], "d_h": DESK_DIMS["d_h"], "d_m": DESK_DIMS["d_m"],
        "batch_size": 16, "lr0": 3e-3, "top_k": 1000,
    },
}

ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {"nc": True, "lc": True, "lp": True},
    "embn": {"nc": False, "lc": False, "lp": False},
    "nc": {"nc": True, "lc": False, "lp": False},
    "nc-lc": {"nc": True, "lc": True, "lp": False},
}

_TRUE = {"1", "true", "on", "yes"}
_FALSE = {"0", "false", "off", "no"}


def _parse_value(key: str, text: str):
    spec = KEYS[key]
    text = text.strip()
    try:
        if spec.kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if spec.kind is int:
            return int(text)
        if spec.kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {spec.kind.__name__})") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig:
    """Resolved configuration: defaults, then preset, then file, then overrides."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def preset(cls, name: str = "fullscale") -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(PRESETS[name])

    def set(self, key: str, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and KEYS[key].kind is not str:
            value = _parse_value(key, value)
        elif KEYS[key].kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif not isinstance(value, KEYS[key].kind):
            raise ConfigError(f"bad value {value!r} for {key} (expected {KEYS[key].kind.__name__})")
        self.values[key] = value

    def update(self, pairs: Mapping[str, Any]) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def override(self, assignments) -> "RunConfig":
        """Apply ``key=value`` strings."""
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)
        return self

    def ablate(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return self.update(ABLATIONS[name])

    def apply_env(self, environ=os.environ) -> "RunConfig":
        if SEED_ENV in environ:
            self.set("seed", environ[SEED_ENV])
        return self

    def load(self, path) -> "RunConfig":
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", path, n)
            k, v = line.split("=", 1)
            try:
                self.set(k.strip(), v)
            except ConfigError as exc:
                raise ParseError(str(exc), path, n) from None
        return self

    def dump(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.values.items())

    def copy(self) -> "RunConfig":
        return RunConfig(self.values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    # ------------------------------------------------------------ derived objects

    @property
    def languages(self) -> tuple[str, ...]:
        langs = tuple(l.strip() for l in self["languages"].split(",") if l.strip())
        if not langs:
            raise ConfigError("at least one language is required")
        return langs

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        keys = ("concepts", "attributes", "attributes_per_image", "bank_size", "distractors",
                "tokens_per_sentence", "sentences_per_lang", "sigma", "distractor_rate", "img_dim", "seed")
        return SyntheticSpec(self.languages, **{k: v[k] for k in keys})

    def split_sizes(self) -> dict[str, int]:
        return {"train": self["n_train"], "val": self["n_val"], "test": self["n_test"]}

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(v["margin"], v["lambda1"], v["lambda2"] if v["lc"] else 0.0, v["lambda3"], v["top_k"])

    def training_config(self) -> TrainingConfig:
        v = self.values
        return TrainingConfig(
            lr0=v["lr0"], gamma=v["gamma"], epochs=v["epochs"], batch_size=v["batch_size"],
            steps_per_epoch=v["steps_per_epoch"] or None, beta1=v["beta1"], beta2=v["beta2"], eps=v["eps"],
            embed_l2=v["embed_l2"], loss=self.loss_config(),
            pretrain_epochs=v["pretrain_epochs"] if v["lp"] else 0,
            pretrain_lr=v["pretrain_lr"] or None,
            nc_layers=LAYERS if v["nc"] else ("s",),
            sampler_style=v["sampler_style"], seed=v["seed"],
        )

    def model_config(self, vocab_sizes: Mapping[str, int], img_dim: int, languages=None) -> ModelConfig:
        v = self.values
        langs = tuple(languages or self.languages)
        return ModelConfig(langs, {l: vocab_sizes[l] for l in langs}, v["d_w"], v["d_u"], v["d_h"], v["d_m"],
                           img_dim, v["parallel"])


def documented_keys() -> str:
    return "\n".join(f"{k:<22}{_format_value(s.default):<12}{s.doc}" for k, s in KEYS.items())
