"""Two-stage training: universal-space pretraining, then joint fine-tuning.

Each step backpropagates two losses. The main loss (neighborhood, matching,
reversed classifier term and the embedding anchor) supplies gradients for
every parameter except the language classifier; the classifier's own loss
supplies the classifier's gradients. One Adam instance applies both with
disjoint masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data.corpus import Corpus
from .data.sampling import BatchSampler, MiniBatch, SamplerSpec
from .errors import CheckpointError, ConfigError, ContractError, SelfTestError, TrainingDiverged
from .evaluator import RecallReport, evaluate
from .losses import LAYERS, LossConfig, Objective, pretrain_objective, total_objective
from .model import ModelConfig, ModelParams, init_params
from .optim import Adam, decayed_lr

PRETRAIN_PREFIXES = ("embed.", "proj.")
BN_INPUT_BOOST = 10.0
# At full model width a few sampled coordinates have gradients near 1e-8,
# where float64 roundoff alone gives ~5e-5 relative error; wiring bugs give O(1).
SELF_TEST_TOLERANCE = 1e-4


@dataclass(frozen=True)
class TrainingConfig:
    lr0: float = 1e-4
    gamma: float = 0.95
    epochs: int = 20
    batch_size: int = 450
    steps_per_epoch: int | None = None  # default: ceil(train images / batch size)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    embed_l2: float = 5e-7
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain_epochs: int = 5
    pretrain_lr: float | None = None  # default: lr0
    nc_layers: tuple[str, ...] = LAYERS
    sampler_style: str = "multi30k"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nc_layers", tuple(self.nc_layers))
        if self.lr0 <= 0 or not 0 < self.gamma <= 1:
            raise ConfigError("lr0 must be positive and gamma must lie in (0, 1]")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be non-negative")
        if self.embed_l2 < 0:
            raise ConfigError("embed_l2 must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam constants")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        if not set(self.nc_layers) <= set(LAYERS):
            raise ConfigError(f"nc_layers must be drawn from {LAYERS}")

    def lr(self, epoch: int) -> float:
        return decayed_lr(self.lr0, self.gamma, epoch)

    def sampler(self) -> SamplerSpec:
        return SamplerSpec(self.sampler_style, self.batch_size)

    def optimizer(self) -> Adam:
        return Adam(self.beta1, self.beta2, self.eps)


def embed_l2_penalty(params: ModelParams, weight: float) -> ad.Node:
    """``weight * sum ||E_l - E_l0||^2`` over the word tables."""
    total = None
    for lang in params.config.languages:
        diff = params[f"embed.{lang}"] - ad.constant(params.embed_init[lang])
        term = ad.total(diff * diff)
        total = term if total is None else total + term
    return weight * total


def adam_step(optimizer: Adam, params: ModelParams, grads: dict, lr: float):
    optimizer.step(params.params, grads, lr)


def _steps(corpus: Corpus, cfg: TrainingConfig) -> int:
    return cfg.steps_per_epoch or -(-len(corpus) // cfg.batch_size)


@dataclass
class StepResult:
    terms: dict
    l2: float


def _collect(params: ModelParams, names) -> dict:
    return {n: params[n].grad.copy() for n in names}


def train_step(batch: MiniBatch, params: ModelParams, optimizer: Adam, cfg: TrainingConfig, lr: float,
               pretrain: bool = False) -> StepResult:
    """One update of both parameter sets from one minibatch."""
    if pretrain:
        obj = pretrain_objective(batch, params, cfg.loss)
        theta_names = [n for n in params.theta_names if n.startswith(PRETRAIN_PREFIXES)]
    else:
        obj = total_objective(batch, params, cfg.loss, cfg.nc_layers)
        theta_names = params.theta_names
    l2 = embed_l2_penalty(params, cfg.embed_l2)
    if not (np.isfinite(obj.theta_loss.value) and np.isfinite(obj.wlc_loss.value)):
        raise TrainingDiverged("loss became non-finite")

    params.zero_grad()
    (obj.theta_loss + l2).backward()
    theta_grads = _collect(params, theta_names)
    params.zero_grad()
    obj.wlc_loss.backward()
    classifier_grads = _collect(params, params.classifier_names)
    params.zero_grad()

    if set(theta_grads) & set(classifier_grads):
        raise ContractError("parameter update masks overlap")
    adam_step(optimizer, params, {**theta_grads, **classifier_grads}, lr)
    return StepResult(obj.terms(), float(l2.value))


HISTORY_TERMS = ("nc", "match", "lc", "wlc", "l2")


def _epoch(corpus, params, optimizer, cfg, lr, rng, sampler, pretrain) -> dict:
    sums = dict.fromkeys(HISTORY_TERMS, 0.0)
    n = _steps(corpus, cfg)
    for _ in range(n):
        res = train_step(sampler.sample(rng), params, optimizer, cfg, lr, pretrain)
        for k in ("nc", "match", "lc", "wlc"):
            sums[k] += res.terms[k]
        sums["l2"] += res.l2
    return {k: v / n for k, v in sums.items()}


def pretrain_mule(corpus: Corpus, params: ModelParams, cfg: TrainingConfig,
                  rng: np.random.Generator | None = None, optimizer: Adam | None = None,
                  history: list | None = None) -> ModelParams:
    """Train word tables, projections and the classifier on the universal-layer loss.

    The encoder and image branch are untouched. Works in place and returns
    ``params``.
    """
    if cfg.pretrain_epochs == 0:
        return params
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 2])
    optimizer = optimizer or cfg.optimizer()
    sampler = BatchSampler(corpus, cfg.sampler())
    lr0 = cfg.pretrain_lr or cfg.lr0
    for epoch in range(cfg.pretrain_epochs):
        lr = decayed_lr(lr0, cfg.gamma, epoch)
        terms = _epoch(corpus, params, optimizer, cfg, lr, rng, sampler, pretrain=True)
        if history is not None:
            history.append({"phase": "pretrain", "epoch": epoch, "lr": lr, **terms})
    return params


def model_config_for(corpus: Corpus, parallel: bool = False, **dims) -> ModelConfig:
    return ModelConfig(tuple(corpus.languages), dict(corpus.vocab_sizes), d_img=corpus.feature_dim,
                       parallel=parallel, **dims)


def train(corpus: Corpus, cfg: TrainingConfig, model_config: ModelConfig | None = None,
          val: Corpus | None = None, params: ModelParams | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[ModelParams, list[dict]]:
    """Pretrain, then fine-tune for ``cfg.epochs``; return the best-validation parameters.

    Without a validation split the final parameters are returned. History
    rows carry the phase, epoch, learning rate, mean loss terms and, for
    fine-tuning epochs with validation, the per-language mR.
    """
    if params is None:
        model_config = model_config or model_config_for(corpus)
        params = init_params(model_config, np.random.default_rng([cfg.seed, 1]))
    optimizer = cfg.optimizer()
    history: list[dict] = []
    rng = np.random.default_rng([cfg.seed, 2])
    best, best_score = params.copy(), -np.inf
    try:
        pretrain_mule(corpus, params, cfg, rng, optimizer, history)
        sampler = BatchSampler(corpus, cfg.sampler())
        for epoch in range(cfg.epochs):
            lr = cfg.lr(epoch)
            row = {"phase": "train", "epoch": epoch, "lr": lr,
                   **_epoch(corpus, params, optimizer, cfg, lr, rng, sampler, pretrain=False)}
            if val is not None:
                report = evaluate(val, params)
                row.update({f"mR_{l}": r.mr for l, r in report.rows.items()})
                score = report.mean_mr
                if score > best_score:
                    best, best_score = params.copy(), score
            history.append(row)
            if on_epoch:
                on_epoch(row)
    except TrainingDiverged as exc:
        raise TrainingDiverged(str(exc), last_good=best, history=history) from None
    if val is None:
        best = params
    return best, history


# ---------------------------------------------------------------- self-test


def micro_batch(corpus: Corpus, n_images: int = 4) -> MiniBatch:
    """The first ``n_images`` images with all of their sentences."""
    if len(corpus) < n_images:
        raise ConfigError(f"self-test needs {n_images} images")
    sentences, owner = [], []
    for pos in range(n_images):
        e = corpus.examples[pos]
        for lang in corpus.languages:
            for s in e.sentences.get(lang, ()):
                sentences.append(s)
                owner.append(pos)
    feats = np.stack([e.feature for e in corpus.examples[:n_images]])
    return MiniBatch(np.arange(n_images), feats, sentences, np.asarray(owner, dtype=np.intp))


def conditioned_point(params: ModelParams, rng: np.random.Generator, scale: float = 1.2) -> ModelParams:
    """A float64 copy with every non-batch-norm tensor redrawn from a fan-in scaled normal.

    Gradient checks at initialization are dominated by finite-difference
    error: word tables start near zero, sentence vectors have tiny norms and
    recurrent gradients are ~1e-7. Redrawing the weights gives O(1)
    activations, so a central difference resolves every coordinate.
    Batch-norm scale and shift keep their initial 1 and 0, which keeps each
    normalized unit straddling the relu kink. The loss is invariant to the
    scale of weights feeding batch norm, so enlarging them by ``a`` shrinks
    the third derivative along them (and the truncation error) by ``a**2``.
    """
    p64 = params.astype(np.float64)
    for name, node in p64.params.items():
        if ".bn" in name:
            continue
        fan_in = node.shape[0] if node.ndim == 2 and not name.startswith("embed.") else 1
        boost = BN_INPUT_BOOST if name.startswith("image.fc") else 1.0
        node.value[...] = rng.normal(scale=boost * scale / np.sqrt(fan_in), size=node.shape)
    return p64


def check_training_gradients(batch: MiniBatch, params: ModelParams, cfg: TrainingConfig,
                             sample: int | None = None, seed: int = 0, tolerance: float = 1e-5,
                             h: float = 1e-4):
    """Central-difference check of both losses on one batch, in float64.

    Returns the two reports (main parameters, classifier). Batch norm runs in
    training mode, so running statistics of the checked copy drift; the
    caller's parameters are not touched.
    """
    p64 = params.astype(np.float64)
    theta = p64.subset(p64.theta_names)
    classifier = p64.subset(p64.classifier_names)
    state: dict = {}

    def build() -> Objective:
        obj = total_objective(batch, p64, cfg.loss, cfg.nc_layers)
        state["l2"] = embed_l2_penalty(p64, cfg.embed_l2)
        return obj

    def theta_graph():
        obj = build()
        return obj.theta_loss + state["l2"]

    def theta_value():
        obj = build()
        return obj.theta_value + float(state["l2"].value)

    theta_report = ad.grad_check(theta_graph, theta, h=h, objective=theta_value, sample=sample, seed=seed,
                                 tolerance=tolerance)
    wlc_report = ad.grad_check(lambda: build().wlc_loss, classifier, h=h, sample=sample, seed=seed,
                               tolerance=tolerance)
    return theta_report, wlc_report


def self_test(corpus: Corpus, params: ModelParams, cfg: TrainingConfig, sample: int = 20,
              tolerance: float = SELF_TEST_TOLERANCE):
    """Gradient-check both losses on the first four images; raise on failure.

    Runs at a conditioned copy of ``params``; the caller's values are untouched.
    """
    point = conditioned_point(params, np.random.default_rng([cfg.seed, 5]))
    reports = check_training_gradients(micro_batch(corpus), point, cfg, sample=sample, tolerance=tolerance)
    for r in reports:
        if not r.passed:
            raise SelfTestError(f"gradient self-test failed: {r}")
    return reports


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.tsv"
HISTORY = "history.tsv"
MODEL_FILE = "model.txt"


def _write_model_config(path: Path, config: ModelConfig):
    lines = [
        f"languages={','.join(config.languages)}",
        "vocab_sizes=" + ",".join(f"{l}:{config.vocab_sizes[l]}" for l in config.languages),
        *(f"{k}={getattr(config, k)}" for k in ("d_w", "d_u", "d_h", "d_m", "d_img")),
        f"parallel={int(config.parallel)}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_model_config(path: Path) -> ModelConfig:
    if not path.exists():
        raise CheckpointError(f"{path}: missing model description")
    kv = dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if line)
    try:
        langs = tuple(kv["languages"].split(","))
        sizes = {a: int(b) for a, b in (item.split(":") for item in kv["vocab_sizes"].split(","))}
        dims = {k: int(kv[k]) for k in ("d_w", "d_u", "d_h", "d_m", "d_img")}
        return ModelConfig(langs, sizes, parallel=bool(int(kv["parallel"])), **dims)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed model description ({exc})") from None


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(path, history: Sequence[dict]):
    keys: list[str] = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in history:
            fh.write("\t".join(_format_cell(row.get(k, "")) for k in keys) + "\n")


def save_checkpoint(params: ModelParams, out_dir, history: Sequence[dict] | None = None):
    """Manifest plus one raw little-endian float32 file per tensor."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, arr in params.state().items():
        fname = f"tensors/{name}.f32"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        rows.append(f"{name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}\t{fname}")
    (out / MANIFEST).write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_model_config(out / MODEL_FILE, params.config)
    if history is not None:
        write_history(out / HISTORY, history)


def load_checkpoint(ckpt_dir) -> ModelParams:
    ckpt = Path(ckpt_dir)
    manifest = ckpt / MANIFEST
    if not manifest.exists():
        raise CheckpointError(f"{manifest}: no manifest")
    config = _read_model_config(ckpt / MODEL_FILE)
    state = {}
    for n, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{manifest}:{n}: expected name<TAB>shape<TAB>file")
        name, shape_txt, fname = parts
        shape = () if shape_txt == "scalar" else tuple(int(d) for d in shape_txt.split("x"))
        path = ckpt / fname
        if not path.exists():
            raise CheckpointError(f"{path}: tensor file for {name} is missing")
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {data.size} values, manifest says {shape}")
        state[name] = data.reshape(shape).astype(np.float32)
    return ModelParams.from_state(config, state)
