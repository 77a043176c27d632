"""The MAGAN objective and its alternating adversarial training loop.

Generator losses, per direction::

    L_G1 = lambda_r * mse(x1, x121) + lambda_d * -mean(log D2(x12)) + lambda_c * L_c1
    L_G2 = lambda_r * mse(x2, x212) + lambda_d * -mean(log D1(x21)) + lambda_c * L_c2

Discriminators see real samples and round-trip reconstructions as real and
mapped samples as fake::

    L_D1 = bce_real(D1(x1)) + bce_real(D1(x121)) + bce_fake(D1(x21))
    L_D2 = bce_real(D2(x2)) + bce_real(D2(x212)) + bce_fake(D2(x12))
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .data import DomainDataset, shared_feature_index
from .errors import ConfigError, DimensionError, TrainingDivergence
from .nn import Discriminator, GeneratorPair, normalize_direction

logger = logging.getLogger(__name__)

CorrespondenceMode = Literal["unsupervised", "semisupervised", "off"]


class TrainConfig(BaseModel):
    """Every knob of a training run. Serialized verbatim into checkpoints."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    iterations: int = Field(100_000, ge=0)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(0.001, ge=0.0)
    keep_prob: float = Field(0.9, gt=0.0, le=1.0)
    lambda_r: float = Field(1.0, ge=0.0)
    lambda_d: float = Field(1.0, ge=0.0)
    lambda_c: float = Field(1.0, ge=0.0)
    correspondence_mode: CorrespondenceMode = "unsupervised"
    shared_feature_indices: Optional[tuple[list[int], list[int]]] = None
    labeled_pairs: list[tuple[int, int]] = Field(default_factory=list)
    seed: int = 0
    gen_hidden: int = Field(128, ge=1)
    disc_hidden: int = Field(128, ge=1)
    minibatch_features: int = Field(16, ge=1)
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)
    d_steps: int = Field(1, ge=1)
    g_steps: int = Field(1, ge=1)
    # show x121 / x212 to the discriminators as extra real samples
    reconstructions_as_real: bool = True
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    log_every: int = Field(100, ge=0)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("shared_feature_indices")
    @classmethod
    def _equal_lengths(cls, v):
        if v is not None and len(v[0]) != len(v[1]):
            raise ValueError(f"shared feature index lists differ in length: {len(v[0])} vs {len(v[1])}")
        return v

    @model_validator(mode="after")
    def _pairs_need_mode(self):
        if self.labeled_pairs and self.correspondence_mode != "semisupervised":
            raise ValueError("labeled_pairs given but correspondence_mode is not 'semisupervised'")
        return self

    @property
    def correspondence_active(self) -> bool:
        return self.correspondence_mode != "off"

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(eq=False)
class MaganModel:
    generators: GeneratorPair
    d1: Discriminator
    d2: Discriminator
    gen_opt: AdamState
    d1_opt: AdamState
    d2_opt: AdamState
    config: TrainConfig
    names1: list[str]
    names2: list[str]

    def __post_init__(self):
        g = self.generators
        if g.out2.n_out != self.d2.n_features or g.out1.n_out != self.d1.n_features:
            raise DimensionError("generator outputs do not match discriminator inputs")
        if len(self.names1) != g.dim1 or len(self.names2) != g.dim2:
            raise DimensionError("feature name lists do not match generator dimensions")

    @classmethod
    def initialize(
        cls,
        dim1: int,
        dim2: int,
        config: TrainConfig,
        rng: np.random.Generator,
        names1: list[str] | None = None,
        names2: list[str] | None = None,
    ) -> "MaganModel":
        c = config
        gens = GeneratorPair.create(dim1, dim2, c.gen_hidden, rng, slope=c.leaky_slope)
        d1 = Discriminator.create(dim1, c.disc_hidden, rng, c.minibatch_features, c.leaky_slope)
        d2 = Discriminator.create(dim2, c.disc_hidden, rng, c.minibatch_features, c.leaky_slope)
        betas = dict(beta1=c.adam_beta1, beta2=c.adam_beta2, epsilon=c.adam_epsilon)
        return cls(
            generators=gens,
            d1=d1,
            d2=d2,
            gen_opt=AdamState.zeros_like(gens.parameters(), **betas),
            d1_opt=AdamState.zeros_like(d1.parameters(), **betas),
            d2_opt=AdamState.zeros_like(d2.parameters(), **betas),
            config=config,
            names1=list(names1) if names1 is not None else [f"f{i}" for i in range(dim1)],
            names2=list(names2) if names2 is not None else [f"f{i}" for i in range(dim2)],
        )

    @property
    def dim1(self) -> int:
        return self.generators.dim1

    @property
    def dim2(self) -> int:
        return self.generators.dim2

    def discriminator_parameters(self) -> list[Tensor]:
        return self.d1.parameters() + self.d2.parameters()


@dataclass
class LossRecord:
    iteration: int
    L_G1: float
    L_G2: float
    L_D1: float
    L_D2: float
    L_r1: float
    L_d1: float
    L_c1: float
    L_r2: float
    L_d2: float
    L_c2: float

    def as_dict(self) -> dict:
        return asdict(self)


HISTORY_COLUMNS = [f.name for f in fields(LossRecord)]


def write_history_csv(history: list[LossRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.iteration] + [repr(getattr(rec, k)) for k in HISTORY_COLUMNS[1:]])


def read_history_csv(path) -> list[LossRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LossRecord(int(r["iteration"]), *(float(r[k]) for k in HISTORY_COLUMNS[1:])) for r in rows
    ]


# ---------------------------------------------------------------------------
# loss terms


def reconstruction_loss(x, x_roundtrip) -> Tensor:
    return ad.mse(x, x_roundtrip)


def generator_adversarial_loss(d_scores) -> Tensor:
    """``-mean(log D(G(x)))``: small when the target discriminator is fooled."""
    return ad.bce_real(d_scores)


def _check_indices(name: str, idx, n: int) -> None:
    bad = [i for i in idx if not -n <= i < n]
    if bad:
        raise ConfigError(f"{name} indices {bad} out of range for {n} features")


def correspondence_loss_unsupervised(x, x_mapped, shared_src, shared_dst) -> Tensor:
    """MSE restricted to the features both domains measure."""
    x, x_mapped = ad.as_tensor(x), ad.as_tensor(x_mapped)
    if len(shared_src) != len(shared_dst):
        raise ConfigError(
            f"shared index lists differ in length: {len(shared_src)} vs {len(shared_dst)}"
        )
    _check_indices("source shared-feature", shared_src, x.shape[-1])
    _check_indices("target shared-feature", shared_dst, x_mapped.shape[-1])
    if not len(shared_src):
        return Tensor(0.0)
    return ad.mse(ad.take_columns(x, shared_src), ad.take_columns(x_mapped, shared_dst))


def _paired_term(mapped: Tensor, target: Tensor) -> Tensor:
    # sum over pairs of per-pair MSE == n_pairs * MSE over all paired rows
    n = mapped.shape[0]
    if n == 0:
        return Tensor(0.0)
    return ad.mse(mapped, target) * float(n)


def correspondence_loss_semisupervised(
    model: MaganModel,
    x1_labeled,
    x2_labeled,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Sum over labeled pairs of ``MSE(G12(x1i), x2j) + MSE(G21(x2j), x1i)``."""
    x1l, x2l = ad.as_tensor(x1_labeled), ad.as_tensor(x2_labeled)
    if x1l.shape[0] != x2l.shape[0]:
        raise ConfigError(f"labeled sets differ in size: {x1l.shape[0]} vs {x2l.shape[0]}")
    if x1l.shape[0] == 0:
        return Tensor(0.0)
    keep = model.config.keep_prob
    g = model.generators
    m12 = g(x1l, "12", training, keep, rng)
    m21 = g(x2l, "21", training, keep, rng)
    return _paired_term(m12, x2l) + _paired_term(m21, x1l)


@dataclass(eq=False)
class _Pass:
    x12: Tensor
    x121: Tensor
    x21: Tensor
    x212: Tensor


def _generator_pass(model, x1, x2, training, rng) -> _Pass:
    g = model.generators
    keep = model.config.keep_prob
    x12 = g(x1, "12", training, keep, rng)
    x21 = g(x2, "21", training, keep, rng)
    return _Pass(x12, g(x12, "21", training, keep, rng), x21, g(x21, "12", training, keep, rng))


def _weighted(c: TrainConfig, lr_, ld_, lc_) -> Tensor:
    total = lr_ * c.lambda_r + ld_ * c.lambda_d
    if c.correspondence_active:
        total = total + lc_ * c.lambda_c
    return total


def _generator_losses(model, x1, x2, p: _Pass, config, training, rng, n_labeled):
    c = config
    keep = c.keep_prob
    lr1 = reconstruction_loss(x1, p.x121)
    lr2 = reconstruction_loss(x2, p.x212)
    ld1 = generator_adversarial_loss(model.d2(p.x12, training, keep, rng))
    ld2 = generator_adversarial_loss(model.d1(p.x21, training, keep, rng))
    if c.correspondence_mode == "unsupervised":
        src, dst = c.shared_feature_indices or ([], [])
        lc1 = correspondence_loss_unsupervised(x1, p.x12, src, dst)
        lc2 = correspondence_loss_unsupervised(x2, p.x21, dst, src)
    elif c.correspondence_mode == "semisupervised" and n_labeled:
        lc1 = _paired_term(p.x12[-n_labeled:], x2[-n_labeled:])
        lc2 = _paired_term(p.x21[-n_labeled:], x1[-n_labeled:])
    else:
        lc1 = lc2 = Tensor(0.0)
    lg1 = _weighted(c, lr1, ld1, lc1)
    lg2 = _weighted(c, lr2, ld2, lc2)
    parts = {
        "L_r1": lr1.item(), "L_d1": ld1.item(), "L_c1": lc1.item(),
        "L_r2": lr2.item(), "L_d2": ld2.item(), "L_c2": lc2.item(),
    }
    return lg1, lg2, parts


def generator_loss(
    model: MaganModel,
    x1,
    x2,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    training: bool = True,
    n_labeled: int = 0,
) -> tuple[Tensor, Tensor, dict[str, float]]:
    """``(L_G1, L_G2, components)`` for one pair of minibatches.

    In semi-supervised mode the last ``n_labeled`` rows of ``x1`` and ``x2``
    are taken to be labeled pairs in matching order.
    """
    config = config or model.config
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    if training and config.keep_prob < 1.0 and rng is None:
        rng = np.random.default_rng(config.seed)
    p = _generator_pass(model, x1, x2, training, rng)
    return _generator_losses(model, x1, x2, p, config, training, rng, n_labeled)


def _disc_terms(d: Discriminator, real, recon, fake, keep, training, rng, recon_as_real=True):
    if not recon_as_real:
        recon = None
    parts = [t for t in (real, recon, fake) if t is not None]
    if all(t.shape == real.shape for t in parts):
        s = d(ad.stack(parts), training, keep, rng)
        scores = [s[i] for i in range(len(parts))]
    else:
        scores = [d(t, training, keep, rng) for t in parts]
    loss = ad.bce_real(scores[0]) + ad.bce_fake(scores[-1])
    if recon is not None:
        loss = loss + ad.bce_real(scores[1])
    return loss


def _discriminator_losses(model, x1, x2, p: _Pass, training, rng, recon_as_real=True):
    keep = model.config.keep_prob
    x12, x121, x21, x212 = (t.detach() for t in (p.x12, p.x121, p.x21, p.x212))
    l1 = _disc_terms(model.d1, x1, x121, x21, keep, training, rng, recon_as_real)
    l2 = _disc_terms(model.d2, x2, x212, x12, keep, training, rng, recon_as_real)
    return l1, l2


def discriminator_loss(
    model: MaganModel,
    x1,
    x2,
    training: bool = False,
    rng: np.random.Generator | None = None,
    reconstructions_as_real: bool | None = None,
) -> tuple[Tensor, Tensor]:
    """``(L_D1, L_D2)``; generator outputs enter as constants.

    ``reconstructions_as_real`` defaults to the model's config.
    """
    if reconstructions_as_real is None:
        reconstructions_as_real = model.config.reconstructions_as_real
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    p = _generator_pass(model, x1.detach(), x2.detach(), training, rng)
    return _discriminator_losses(model, x1, x2, p, training, rng, reconstructions_as_real)


# ---------------------------------------------------------------------------
# training


def _require_finite(iteration: int, **values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDivergence(name, iteration, v)


def train_step(
    model: MaganModel,
    batch1,
    batch2,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    iteration: int = 0,
    n_labeled: int = 0,
) -> LossRecord:
    """One discriminator update followed by one generator update."""
    c = config or model.config
    rng = rng if rng is not None else np.random.default_rng(c.seed)
    x1, x2 = ad.as_tensor(batch1), ad.as_tensor(batch2)
    g_params = model.generators.parameters()
    d1_params, d2_params = model.d1.parameters(), model.d2.parameters()

    # G is not touched by the discriminator update, so one forward pass
    # serves both halves of the step.
    p = _generator_pass(model, x1, x2, True, rng)

    for _ in range(c.d_steps):
        ld1, ld2 = _discriminator_losses(model, x1, x2, p, True, rng, c.reconstructions_as_real)
        _require_finite(iteration, L_D1=ld1.item(), L_D2=ld2.item())
        ad.zero_grad(d1_params + d2_params)
        ad.backward(ld1 + ld2)
        ad.adam_step(d1_params, [q.grad for q in d1_params], model.d1_opt, c.learning_rate)
        ad.adam_step(d2_params, [q.grad for q in d2_params], model.d2_opt, c.learning_rate)

    for k in range(c.g_steps):
        if k:
            p = _generator_pass(model, x1, x2, True, rng)
        with ad.frozen(d1_params + d2_params):
            lg1, lg2, parts = _generator_losses(model, x1, x2, p, c, True, rng, n_labeled)
            _require_finite(iteration, L_G1=lg1.item(), L_G2=lg2.item(), **parts)
            ad.zero_grad(g_params)
            ad.backward(lg1 + lg2)
        ad.adam_step(g_params, [q.grad for q in g_params], model.gen_opt, c.learning_rate)

    return LossRecord(
        iteration=iteration,
        L_G1=lg1.item(),
        L_G2=lg2.item(),
        L_D1=ld1.item(),
        L_D2=ld2.item(),
        **parts,
    )


class _BatchCycler:
    """Reshuffles its index range each epoch and serves fixed-size batches."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need:
            take = min(need, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + take])
            self.pos += take
            need -= take
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(out)


def resolve_config(data1: DomainDataset, data2: DomainDataset, config: TrainConfig) -> TrainConfig:
    """Validate ``config`` against the data and fill in derived fields.

    Raises :class:`ConfigError` before any training work is done.
    """
    if data1.n_rows == 0 or data2.n_rows == 0:
        raise ConfigError(f"empty dataset: {data1.n_rows} and {data2.n_rows} rows")
    mode = config.correspondence_mode
    update = {}
    if mode == "unsupervised":
        idx = config.shared_feature_indices
        if idx is None:
            idx = shared_feature_index(data1, data2)
            if not idx[0]:
                raise ConfigError(
                    "unsupervised correspondence needs shared features, but the domains "
                    "have no feature names in common"
                )
            update["shared_feature_indices"] = idx
        elif not idx[0]:
            raise ConfigError("unsupervised correspondence with an empty shared-feature list")
        _check_indices("domain-1 shared-feature", idx[0], data1.n_features)
        _check_indices("domain-2 shared-feature", idx[1], data2.n_features)
    elif mode == "semisupervised":
        if not config.labeled_pairs:
            raise ConfigError("semisupervised correspondence needs at least one labeled pair")
        _check_indices("labeled-pair domain-1", [i for i, _ in config.labeled_pairs], data1.n_rows)
        _check_indices("labeled-pair domain-2", [j for _, j in config.labeled_pairs], data2.n_rows)
    return config.model_copy(update=update) if update else config


def train(
    data1: DomainDataset,
    data2: DomainDataset,
    config: TrainConfig,
    progress: Callable[[LossRecord], None] | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[MaganModel, list[LossRecord]]:
    """Train a model for ``config.iterations`` alternating steps.

    Minibatches are drawn by shuffling each domain independently every
    epoch; the smaller domain simply wraps around more often. Labeled pairs
    are appended to every minibatch.
    """
    config = resolve_config(data1, data2, config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, batch_rng, step_rng = (np.random.default_rng(s) for s in seeds)
    model = MaganModel.initialize(
        data1.n_features, data2.n_features, config, init_rng, data1.feature_names, data2.feature_names
    )
    history: list[LossRecord] = []
    if config.iterations == 0:
        return model, history

    X1, X2 = data1.matrix, data2.matrix
    size = min(config.batch_size, len(X1), len(X2))
    c1 = _BatchCycler(len(X1), batch_rng)
    c2 = _BatchCycler(len(X2), batch_rng)
    n_labeled = 0
    if config.correspondence_mode == "semisupervised":
        pairs = np.asarray(config.labeled_pairs, dtype=np.intp)
        lab1, lab2 = X1[pairs[:, 0]], X2[pairs[:, 1]]
        n_labeled = len(pairs)

    for it in range(1, config.iterations + 1):
        b1, b2 = X1[c1.next(size)], X2[c2.next(size)]
        if n_labeled:
            b1 = np.concatenate([b1, lab1])
            b2 = np.concatenate([b2, lab2])
        rec = train_step(model, b1, b2, config, step_rng, iteration=it, n_labeled=n_labeled)
        history.append(rec)
        if progress is not None and config.log_every and it % config.log_every == 0:
            progress(rec)
        if checkpoint_path is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            from .checkpoint import save_model

            save_model(model, checkpoint_path)
    return model, history


def map_forward(model: MaganModel, X, direction) -> np.ndarray:
    """Evaluation-mode mapping of a whole matrix (no dropout)."""
    key = normalize_direction(direction)
    X = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    expected = model.dim1 if key == "12" else model.dim2
    if X.ndim != 2 or X.shape[1] != expected:
        raise DimensionError(
            f"direction {key} expects {expected} input columns, got shape {X.shape}"
        )
    return model.generators(Tensor(X), key, training=False).data
