"""Analytic gradients, a finite-difference oracle, Adam, initialization,
the training loop and checkpoint I/O."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import DEFAULT_ALPHA, RegionBag, RegionLabel, label_regions
from .model import (CLS_INDEX, DEFAULT_HIDDEN, DEFAULT_K, DET_COLUMNS, DET_INDEX, ModelParams,
                    Variant, forward, sample_dropout, softmax)
from .objectives import (EPS, LossWeights, SupervisionSplit, loss_terms, term_coefficients)
from .seeding import derive_rng

log = logging.getLogger(__name__)

Grads = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    k: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    lambda2: float = 1.0
    beta: float = 1.0
    variant: Variant = Variant.CLS_DET_RS
    dropout_keep: float = 0.5
    l2: float = 1e-4
    lr: float = 1e-4
    hidden_dim: int = DEFAULT_HIDDEN
    b_term_all: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.dropout_keep <= 1:
            raise ValueError("dropout_keep must lie in (0, 1]")


# --------------------------------------------------------------------------
# loss and gradient


def _region_labels(bags: Sequence[RegionBag], alpha: float) -> list[list[RegionLabel] | None]:
    return [label_regions(b, alpha) if b.supervision == "full" else None for b in bags]


def _l2_penalty(params: ModelParams, l2: float) -> float:
    if l2 == 0:
        return 0.0
    names = [n for n in ModelParams.WEIGHTS if n in params.tensor_names()]
    return 0.5 * l2 * math.fsum(float(np.sum(getattr(params, n) ** 2)) for n in names)


def batch_loss(params: ModelParams, bags: Sequence[RegionBag],
               labels: Sequence[list[RegionLabel] | None], weights: LossWeights, *,
               dropouts=None, masks=None, l2: float = 0.0, b_term_all: bool = True,
               skip_empty_weak: bool = False) -> tuple[float, list]:
    """Total loss (plus L2 penalty) and the traces it was computed from.

    ``dropouts``/``masks`` are per-bag overrides; None means inference-mode
    dropout and freshly computed region selection.
    """
    traces = [forward(b, params, "infer",
                      dropout=None if dropouts is None else dropouts[t],
                      mask=None if masks is None else masks[t])
              for t, b in enumerate(bags)]
    split = SupervisionSplit.from_batch(bags, labels)
    terms = loss_terms(traces, bags, labels, split, weights, b_term_all, skip_empty_weak)
    return terms["total"] + _l2_penalty(params, l2), traces


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def _image_gradient(trace, bag, labels, t, co, split, params, grads) -> None:
    P, q = trace.p_cls, trace.p_det
    m = trace.m
    gP = np.zeros((m, 3))
    gq = np.zeros((m, 2))
    g_img = np.zeros(2)

    # image-level terms
    for c, y, coef in (("M", bag.weak_label.y_M, co.weak_M if t in split.weak_indices else 0.0),
                       ("B", bag.weak_label.y_B, co.weak_B if t in co.weak_B_indices else 0.0)):
        if coef == 0.0:
            continue
        j = DET_INDEX[c]
        p = trace.p_image[j]
        if EPS < p < 1.0 - EPS:  # clamp has zero slope outside
            g_img[j] += coef * (-1.0 / p if y else 1.0 / (1.0 - p))
    for j, c in enumerate(DET_COLUMNS):
        ci = CLS_INDEX[c]
        gq[:, j] += g_img[j] * P[:, ci]
        gP[:, ci] += g_img[j] * q[:, j]

    g_unmasked = None
    qu = None
    if labels is not None:
        iM, iB, iN = CLS_INDEX["M"], CLS_INDEX["B"], CLS_INDEX["N"]
        for i, y in enumerate(labels):
            if y is RegionLabel.M:
                p = P[i, iM]
                if EPS < p < 1.0 - EPS:
                    gP[i, iM] -= co.cls / p
            elif y is RegionLabel.BN:
                s = P[i, iB] + P[i, iN]
                if EPS < s < 1.0 - EPS:
                    gP[i, iB] -= co.cls / s
                    gP[i, iN] -= co.cls / s
        if t in split.det_indices and params.variant.has_detection:
            sel = np.array([y is RegionLabel.M for y in labels])
            qu = softmax(trace.det_logits[:, DET_INDEX["M"]])
            s = qu[sel].sum()
            if EPS < s < 1.0:
                g_unmasked = np.where(sel, -co.det / s, 0.0)

    # softmax backprop, classification branch
    gZ = np.zeros((m, 3))
    if params.variant.has_normal_class:
        gZ = P * (gP - np.sum(gP * P, axis=1, keepdims=True))
    else:
        Pa, ga = P[:, 1:], gP[:, 1:]
        gZ[:, 1:] = Pa * (ga - np.sum(ga * Pa, axis=1, keepdims=True))

    H = trace.hidden
    gH = gZ @ params.Wc.T
    grads["Wc"] += H.T @ gZ
    grads["bc"] += gZ.sum(axis=0)

    if params.variant.has_detection:
        gS = q * (gq - np.sum(gq * q, axis=0, keepdims=True))
        if g_unmasked is not None:
            gS[:, DET_INDEX["M"]] += qu * (g_unmasked - qu @ g_unmasked)
        gH += gS @ params.U.T
        grads["U"] += H.T @ gS
        grads["bu"] += gS.sum(axis=0)

    gpre = gH * trace.dropout * (trace.pre > 0)
    grads["W"] += trace.features.T @ gpre
    grads["b"] += gpre.sum(axis=0)


def backward(params: ModelParams, bags: Sequence[RegionBag],
             labels: Sequence[list[RegionLabel] | None], weights: LossWeights, *,
             dropouts=None, masks=None, l2: float = 0.0, b_term_all: bool = True,
             skip_empty_weak: bool = False) -> tuple[float, Grads, list]:
    """Loss and its exact gradient, holding dropout factors and region
    selection masks fixed. Returns (loss, grads, traces)."""
    if not bags:
        raise ValueError("empty batch")
    loss, traces = batch_loss(params, bags, labels, weights, dropouts=dropouts, masks=masks,
                              l2=l2, b_term_all=b_term_all, skip_empty_weak=skip_empty_weak)
    split = SupervisionSplit.from_batch(bags, labels)
    co = term_coefficients(split, weights, b_term_all, skip_empty_weak)
    grads = {n: np.zeros_like(a) for n, a in params.arrays().items()}
    for t, (tr, bag) in enumerate(zip(traces, bags)):
        _image_gradient(tr, bag, labels[t], t, co, split, params, grads)
    if l2:
        for n in ModelParams.WEIGHTS:
            if n in params.tensor_names():
                grads[n] += l2 * getattr(params, n)
    _check_finite("loss", loss)
    for n, g in grads.items():
        _check_finite(f"gradient of {n}", g)
    return loss, grads, traces


def finite_difference_oracle(params: ModelParams, bags: Sequence[RegionBag],
                             labels: Sequence[list[RegionLabel] | None], weights: LossWeights,
                             *, step: float = 1e-4, dropouts=None, masks=None, l2: float = 0.0,
                             b_term_all: bool = True, loss_fn=None) -> Grads:
    """Central differences, coordinate by coordinate.

    Masks are frozen from one unperturbed forward pass unless given.
    ``loss_fn(params)`` replaces the model loss when supplied.
    """
    if loss_fn is None:
        if masks is None:
            _, traces = batch_loss(params, bags, labels, weights, dropouts=dropouts,
                                   b_term_all=b_term_all)
            masks = [tr.mask for tr in traces]

        def loss_fn(p):
            return batch_loss(p, bags, labels, weights, dropouts=dropouts, masks=masks, l2=l2,
                              b_term_all=b_term_all)[0]

    grads = {}
    for name in params.TENSORS:
        base = getattr(params, name)
        g = np.zeros_like(base)
        if name in params.tensor_names():
            for idx in np.ndindex(base.shape):
                work = base.copy()
                work[idx] = base[idx] + step
                up = loss_fn(params.replace(**{name: work}))
                work[idx] = base[idx] - step
                down = loss_fn(params.replace(**{name: work}))
                g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_errors(analytic: Grads, numeric: Grads, floor: float = 1e-8) -> dict[str, float]:
    """Worst |a - n| / max(|a|, |n|) per tensor over coordinates with |a| > floor."""
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        big = np.abs(a) > floor
        if not big.any():
            out[name] = 0.0
            continue
        err = np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))
        out[name] = float(err.max())
    return out


# --------------------------------------------------------------------------
# optimizer and initialization


@dataclass
class OptimizerState:
    first_moment: Grads
    second_moment: Grads
    learning_rate: float = 1e-4
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon_hat: float = 1e-8
    weight_decay: float = 0.0
    bias_correction: bool = True
    step_count: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "OptimizerState":
        zeros = {n: np.zeros_like(a) for n, a in params.arrays().items()}
        return cls(first_moment=zeros, second_moment={n: z.copy() for n, z in zeros.items()},
                   **kw)


def adam_step(state: OptimizerState, params: ModelParams,
              grads: Grads) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update. ``weight_decay`` is added to the
    gradient of the weight matrices (not biases) before the moment update."""
    t = state.step_count + 1
    b1, b2 = state.beta_1, state.beta_2
    new_arrays, m1, m2 = {}, {}, {}
    for name, theta in params.arrays().items():
        g = grads[name]
        if state.weight_decay and name in ModelParams.WEIGHTS:
            g = g + state.weight_decay * theta
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        if state.bias_correction:
            m_hat, v_hat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        else:
            m_hat, v_hat = m, v
        new_arrays[name] = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_hat)
        m1[name], m2[name] = m, v
    new_state = OptimizerState(first_moment=m1, second_moment=m2,
                               learning_rate=state.learning_rate, beta_1=b1, beta_2=b2,
                               epsilon_hat=state.epsilon_hat, weight_decay=state.weight_decay,
                               bias_correction=state.bias_correction, step_count=t)
    return params.replace(**new_arrays), new_state


BRANCH_STD = 1e-4


def initialize(config: TrainConfig, feature_dim: int,
               rng: np.random.Generator | None = None) -> ModelParams:
    """Shared layer ~ N(0, 2/fan_in); branch weights ~ N(0, 1e-4^2); zero biases."""
    if rng is None:
        rng = derive_rng(config.seed, "init")
    d_h = config.hidden_dim
    W = rng.normal(0.0, math.sqrt(2.0 / feature_dim), size=(feature_dim, d_h))
    Wc = rng.normal(0.0, BRANCH_STD, size=(d_h, 3))
    U = rng.normal(0.0, BRANCH_STD, size=(d_h, 2))
    return ModelParams(W=W, b=np.zeros(d_h), Wc=Wc, bc=np.zeros(3), U=U, bu=np.zeros(2),
                       k=config.k, variant=config.variant)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float] = field(default_factory=list)


def train(bags: Sequence[RegionBag], config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the multi-task loss; deterministic under config.seed.

    Each batch holds whole images. With lambda2 = 0 every image is treated
    as weakly labeled and region labels are never computed.
    """
    if not bags:
        raise ValueError("empty dataset")
    feature_dim = bags[0].features.shape[1]
    params = initialize(config, feature_dim)
    state = OptimizerState.for_params(params, learning_rate=config.lr)
    if config.lambda2 > 0:
        labels = _region_labels(bags, config.alpha)
    else:
        labels = [None] * len(bags)
    shuffle_rng = derive_rng(config.seed, "shuffle")
    dropout_rng = derive_rng(config.seed, "dropout")

    history = []
    n = len(bags)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [bags[i] for i in idx]
            batch_labels = [labels[i] for i in idx]
            dropouts = [sample_dropout(dropout_rng, (b.m, params.hidden_dim), config.dropout_keep)
                        for b in batch]
            split = SupervisionSplit.from_batch(batch, batch_labels)
            weights = LossWeights.from_split(split, beta=config.beta, lambda2=config.lambda2)
            loss, grads, _ = backward(params, batch, batch_labels, weights, dropouts=dropouts,
                                      l2=config.l2, b_term_all=config.b_term_all,
                                      skip_empty_weak=True)
            losses.append(loss - _l2_penalty(params, config.l2))
            params, state = adam_step(state, params, grads)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return TrainResult(params, history)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["variant"] = config.variant.value
    return d


# --------------------------------------------------------------------------
# checkpoint format

MAGIC = b"DMIL"
FORMAT_VERSION = 1
VARIANT_TAGS = {Variant.CLS_DET_RS: 0, Variant.CLS_DET: 1, Variant.DB_BASELINE: 2,
                Variant.MAX_REGION: 3}
_TAG_VARIANTS = {v: k for k, v in VARIANT_TAGS.items()}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    names = params.tensor_names()
    parts = [MAGIC, struct.pack("<IIIBII", FORMAT_VERSION, params.feature_dim, params.hidden_dim,
                                VARIANT_TAGS[params.variant], params.k, len(names))]
    for name in names:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes) -> ModelParams:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    head = struct.calcsize("<IIIBII")
    version, d_in, d_h, tag, k, n_tensors = struct.unpack_from("<IIIBII", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    variant = _TAG_VARIANTS[tag]
    params = ModelParams.zeros(d_in, d_h, k=k, variant=variant)
    names = params.tensor_names()
    if n_tensors != len(names):
        raise CheckpointError(f"expected {len(names)} tensors, found {n_tensors}")
    off = 4 + head
    arrays = {}
    for name in names:
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        shape = getattr(params, name).shape
        if count != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name}: {count} values, expected shape {shape}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return params.replace(**arrays)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
