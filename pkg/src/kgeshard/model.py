"""Encoder, scoring functions, losses, regularisation and their analytic
gradients. Everything here is a pure function over caller-supplied arrays and
is agnostic to how parameters are sharded.

Vector layout conventions:

* Complex-valued models (RotatE, ComplEx) interpret a length-d real vector as
  d/2 complex components with interleaved (real, imaginary) pairs.
* RotatE relation vectors hold d/2 rotation phases; all other models use
  length-d relation vectors (interleaved re/im for ComplEx).
* Distance scores support p in {1, 2}, applied to per-component complex
  moduli for RotatE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ConfigError

SCORE_FUNCTIONS = ("transe", "transh", "rotate", "distmult", "complex")
LOSS_FUNCTIONS = ("log_sigmoid", "sampled_softmax_ce")


@dataclass
class ModelConfig:
    score_fn: str = "transe"
    distance_p: int = 1
    embedding_dim: int = 256
    feature_dim: int = 768
    margin: float = 1.0
    adversarial_temperature: float = 1.0
    loss: str = "log_sigmoid"
    reg_embedding: float = 0.0  # weight on the final-embedding penalty
    reg_shallow: float = 0.0  # weight on the shallow-component penalty
    reg_feature: float = 0.0  # weight on the feature-projection penalty
    reg_plain_norm: bool = False  # penalise the L3 norm itself, not its cube
    feature_dropout: float = 0.0
    tie_projections: bool = False
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ConfigError(
                f"model.score_fn must be one of {SCORE_FUNCTIONS}, got "
                f"{self.score_fn!r}"
            )
        if self.loss not in LOSS_FUNCTIONS:
            raise ConfigError(
                f"model.loss must be one of {LOSS_FUNCTIONS}, got {self.loss!r}"
            )
        if self.distance_p not in (1, 2):
            raise ConfigError(f"model.distance_p must be 1 or 2, got {self.distance_p}")
        if self.embedding_dim < 1:
            raise ConfigError("model.embedding_dim must be positive")
        if self.score_fn in ("rotate", "complex") and self.embedding_dim % 2:
            raise ConfigError(
                f"model.embedding_dim must be even for {self.score_fn}, got "
                f"{self.embedding_dim}"
            )
        if self.margin < 0:
            raise ConfigError("model.margin must be >= 0")
        if self.score_fn in ("distmult", "complex") and self.margin != 0.0:
            raise ConfigError(f"model.margin must be 0 for {self.score_fn}")
        if self.adversarial_temperature < 0:
            raise ConfigError("model.adversarial_temperature must be >= 0")
        if min(self.reg_embedding, self.reg_shallow, self.reg_feature) < 0:
            raise ConfigError("regularisation weights must be >= 0")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ConfigError("model.feature_dropout must be in [0, 1)")
        if self.feature_dim < 0:
            raise ConfigError("model.feature_dim must be >= 0")

    @property
    def relation_dim(self) -> int:
        return self.embedding_dim // 2 if self.score_fn == "rotate" else self.embedding_dim

    @property
    def uses_normals(self) -> bool:
        return self.score_fn == "transh"

    @property
    def uses_projections(self) -> bool:
        return self.feature_dim > 0


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def encode_entity(
    shallow: np.ndarray,
    features: Optional[np.ndarray],
    projection: Optional[np.ndarray],
    dropout_mask: Optional[np.ndarray] = None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """Final embedding: shallow + projection @ features, with inverted dropout
    applied to the projected vector (training only; mask supplied by caller)."""
    if features is None or projection is None:
        return shallow.copy()
    if features.shape[-1] != projection.shape[1]:
        raise ConfigError(
            f"feature dim {features.shape[-1]} != projection input dim "
            f"{projection.shape[1]}"
        )
    proj = features @ projection.T
    if dropout_mask is not None:
        proj = proj * (dropout_mask / (1.0 - dropout_rate))
    return shallow + proj


# ---------------------------------------------------------------------------
# p-distance helpers (shared by TransE / TransH / RotatE)
# ---------------------------------------------------------------------------


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _neg_pnorm(delta: np.ndarray, p: int):
    """Score -||delta||_p over the last axis; returns (score, backward_cache)."""
    if p == 1:
        return -np.abs(delta).sum(axis=-1), ("l1", np.sign(delta))
    nrm = np.sqrt((delta * delta).sum(axis=-1))
    return -nrm, ("l2", delta, nrm)


def _neg_pnorm_backward(cache, dscore: np.ndarray) -> np.ndarray:
    if cache[0] == "l1":
        return -cache[1] * dscore[..., None]
    _, delta, nrm = cache
    return -_safe_div(delta, nrm[..., None]) * dscore[..., None]


def _neg_complex_pnorm(dre: np.ndarray, dim: np.ndarray, p: int):
    """Score -||delta||_p where components are complex moduli of (dre, dim)."""
    if p == 2:
        nrm = np.sqrt((dre * dre + dim * dim).sum(axis=-1))
        return -nrm, ("l2", dre, dim, nrm)
    mod = np.sqrt(dre * dre + dim * dim)
    return -mod.sum(axis=-1), ("l1", dre, dim, mod)


def _neg_complex_pnorm_backward(cache, dscore: np.ndarray):
    kind, dre, dim, denom = cache
    if kind == "l2":
        scale = _safe_div(dscore, denom)[..., None]
        return -dre * scale, -dim * scale
    g = dscore[..., None]
    return -_safe_div(dre, denom) * g, -_safe_div(dim, denom) * g


def _re(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2]


def _im(x: np.ndarray) -> np.ndarray:
    return x[..., 1::2]


def _interleave(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    out = np.empty(re.shape[:-1] + (re.shape[-1] * 2,), dtype=re.dtype)
    out[..., 0::2] = re
    out[..., 1::2] = im
    return out


# ---------------------------------------------------------------------------
# Scoring functions
# ---------------------------------------------------------------------------


class TransEScorer:
    """-||h + r - t||_p"""

    def __init__(self, p: int):
        self.p = p

    def pos(self, h, r, t, w=None):
        score, cache = _neg_pnorm(h + r - t, self.p)
        return score, cache

    def pos_backward(self, cache, dscore):
        ddelta = _neg_pnorm_backward(cache, dscore)
        return ddelta, ddelta.copy(), -ddelta, None

    def neg(self, h, r, negs, w=None):
        delta = (h + r)[:, None, :] - negs[None, :, :]
        return _neg_pnorm(delta, self.p)

    def neg_backward(self, cache, dscore):
        ddelta = _neg_pnorm_backward(cache, dscore)
        dh = ddelta.sum(axis=1)
        return dh, dh.copy(), -ddelta.sum(axis=0), None


class TransHScorer:
    """-||P(h) + r - P(t)||_p with P projecting onto the hyperplane orthogonal
    to the relation normal, which is normalised in the forward pass (gradients
    flow through the normalisation)."""

    def __init__(self, p: int):
        self.p = p

    @staticmethod
    def _unit(w):
        nrm = np.sqrt((w * w).sum(axis=-1, keepdims=True))
        return w / nrm, nrm

    def pos(self, h, r, t, w=None):
        wn, wnorm = self._unit(w)
        ah = (wn * h).sum(-1, keepdims=True)
        at = (wn * t).sum(-1, keepdims=True)
        delta = (h - ah * wn) + r - (t - at * wn)
        score, pcache = _neg_pnorm(delta, self.p)
        return score, (pcache, h, t, wn, wnorm, ah, at)

    def pos_backward(self, cache, dscore):
        pcache, h, t, wn, wnorm, ah, at = cache
        ddelta = _neg_pnorm_backward(pcache, dscore)
        gw = (ddelta * wn).sum(-1, keepdims=True)
        dh = ddelta - gw * wn
        dt = -dh
        # d/dwn of -(wn.h)wn + (wn.t)wn terms, for G = ddelta:
        dwn = -(gw * h + ah * ddelta) + (gw * t + at * ddelta)
        dw = (dwn - (dwn * wn).sum(-1, keepdims=True) * wn) / wnorm
        return dh, ddelta.copy(), dt, dw

    def neg(self, h, r, negs, w=None):
        wn, wnorm = self._unit(w)
        ah = (wn * h).sum(-1, keepdims=True)
        ph = h - ah * wn
        c = wn @ negs.T  # [B, N]
        delta = (ph + r)[:, None, :] - negs[None, :, :] + c[..., None] * wn[:, None, :]
        score, pcache = _neg_pnorm(delta, self.p)
        return score, (pcache, h, negs, wn, wnorm, ah, c)

    def neg_backward(self, cache, dscore):
        pcache, h, negs, wn, wnorm, ah, c = cache
        ddelta = _neg_pnorm_backward(pcache, dscore)  # [B, N, d]
        dph = ddelta.sum(axis=1)  # gradient wrt P(h) + r
        gw_h = (dph * wn).sum(-1, keepdims=True)
        dh = dph - gw_h * wn
        dwn = -(gw_h * h + ah * dph)
        # tail side: P(t_n) enters with negative sign, G = -ddelta
        gneg = -ddelta
        gw_t = (gneg * wn[:, None, :]).sum(-1)  # [B, N]
        dnegs = (gneg - gw_t[..., None] * wn[:, None, :]).sum(axis=0)
        dwn += -(gw_t[..., None] * negs[None, :, :] + c[..., None] * gneg).sum(axis=1)
        dw = (dwn - (dwn * wn).sum(-1, keepdims=True) * wn) / wnorm
        return dh, dph.copy(), dnegs, dw


class RotatEScorer:
    """-||h o e^{i r} - t||_p on d/2 complex components; r holds phases."""

    def __init__(self, p: int):
        self.p = p

    @staticmethod
    def _rotate(h, phases):
        cosr, sinr = np.cos(phases), np.sin(phases)
        hre, him = _re(h), _im(h)
        return hre * cosr - him * sinr, hre * sinr + him * cosr, cosr, sinr

    def pos(self, h, r, t, w=None):
        rot_re, rot_im, cosr, sinr = self._rotate(h, r)
        dre, dim = rot_re - _re(t), rot_im - _im(t)
        score, pcache = _neg_complex_pnorm(dre, dim, self.p)
        return score, (pcache, rot_re, rot_im, cosr, sinr)

    def pos_backward(self, cache, dscore):
        pcache, rot_re, rot_im, cosr, sinr = cache
        ddre, ddim = _neg_complex_pnorm_backward(pcache, dscore)
        dh = _interleave(ddre * cosr + ddim * sinr, -ddre * sinr + ddim * cosr)
        dt = _interleave(-ddre, -ddim)
        dr = ddim * rot_re - ddre * rot_im
        return dh, dr, dt, None

    def neg(self, h, r, negs, w=None):
        rot_re, rot_im, cosr, sinr = self._rotate(h, r)
        dre = rot_re[:, None, :] - _re(negs)[None, :, :]
        dim = rot_im[:, None, :] - _im(negs)[None, :, :]
        score, pcache = _neg_complex_pnorm(dre, dim, self.p)
        return score, (pcache, rot_re, rot_im, cosr, sinr)

    def neg_backward(self, cache, dscore):
        pcache, rot_re, rot_im, cosr, sinr = cache
        ddre, ddim = _neg_complex_pnorm_backward(pcache, dscore)  # [B, N, d/2]
        drot_re, drot_im = ddre.sum(axis=1), ddim.sum(axis=1)
        dh = _interleave(
            drot_re * cosr + drot_im * sinr, -drot_re * sinr + drot_im * cosr
        )
        dnegs = _interleave(-ddre.sum(axis=0), -ddim.sum(axis=0))
        dr = drot_im * rot_re - drot_re * rot_im
        return dh, dr, dnegs, None


class DistMultScorer:
    """<r, h, t> trilinear product."""

    def pos(self, h, r, t, w=None):
        return (r * h * t).sum(-1), (h, r, t)

    def pos_backward(self, cache, dscore):
        h, r, t = cache
        g = dscore[..., None]
        return r * t * g, h * t * g, r * h * g, None

    def neg(self, h, r, negs, w=None):
        rh = r * h
        return rh @ negs.T, (h, r, negs, rh)

    def neg_backward(self, cache, dscore):
        h, r, negs, rh = cache
        drh = dscore @ negs
        return drh * r, drh * h, dscore.T @ rh, None


class ComplExScorer:
    """Re <r, h, conj(t)> on d/2 complex components."""

    @staticmethod
    def _parts(h, r):
        h1, h2, r1, r2 = _re(h), _im(h), _re(r), _im(r)
        return h1, h2, r1, r2, r1 * h1 - r2 * h2, r1 * h2 + r2 * h1

    def pos(self, h, r, t, w=None):
        h1, h2, r1, r2, a, c = self._parts(h, r)
        t1, t2 = _re(t), _im(t)
        return (a * t1 + c * t2).sum(-1), (h1, h2, r1, r2, a, c, t1, t2)

    def pos_backward(self, cache, dscore):
        h1, h2, r1, r2, a, c, t1, t2 = cache
        g = dscore[..., None]
        da, dc = t1 * g, t2 * g
        return self._chain(h1, h2, r1, r2, da, dc) + (
            _interleave(a * g, c * g),
            None,
        )

    def neg(self, h, r, negs, w=None):
        h1, h2, r1, r2, a, c = self._parts(h, r)
        t1, t2 = _re(negs), _im(negs)
        return a @ t1.T + c @ t2.T, (h1, h2, r1, r2, a, c, t1, t2)

    def neg_backward(self, cache, dscore):
        h1, h2, r1, r2, a, c, t1, t2 = cache
        da, dc = dscore @ t1, dscore @ t2
        dnegs = _interleave(dscore.T @ a, dscore.T @ c)
        return self._chain(h1, h2, r1, r2, da, dc) + (dnegs, None)

    @staticmethod
    def _chain(h1, h2, r1, r2, da, dc):
        dh = _interleave(da * r1 + dc * r2, -da * r2 + dc * r1)
        dr = _interleave(da * h1 + dc * h2, -da * h2 + dc * h1)
        return dh, dr


def get_scorer(config: ModelConfig):
    if config.score_fn == "transe":
        return TransEScorer(config.distance_p)
    if config.score_fn == "transh":
        return TransHScorer(config.distance_p)
    if config.score_fn == "rotate":
        return RotatEScorer(config.distance_p)
    if config.score_fn == "distmult":
        return DistMultScorer()
    return ComplExScorer()


def score_triples(
    config: ModelConfig,
    head: np.ndarray,
    relation: np.ndarray,
    tail: np.ndarray,
    normal: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Score already-encoded batches elementwise; single vectors accepted."""
    squeeze = head.ndim == 1
    h = np.atleast_2d(head)
    r = np.atleast_2d(relation)
    t = np.atleast_2d(tail)
    w = np.atleast_2d(normal) if normal is not None else None
    score, _ = get_scorer(config).pos(h, r, t, w)
    return score[0] if squeeze else score


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    loss: np.ndarray  # [B]
    dpos: np.ndarray  # [B]
    dneg: np.ndarray  # [B, N]
    weights: Optional[np.ndarray] = None  # [B, N], log-sigmoid loss only


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, 0.0)


def _check_negatives(neg_scores: np.ndarray) -> None:
    if neg_scores.ndim != 2 or neg_scores.shape[1] < 1:
        raise ConfigError(
            "losses require at least one negative sample per positive "
            f"(got negative scores of shape {neg_scores.shape})"
        )


def adversarial_weights(
    neg_scores: np.ndarray,
    temperature: float,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Softmax(temperature * score) over unmasked negatives, per row.

    The weights are treated as constants under differentiation.
    """
    if mask is None:
        mask = np.ones_like(neg_scores)
    logits = temperature * neg_scores
    shifted = logits - np.max(np.where(mask > 0, logits, -np.inf), axis=1, keepdims=True)
    expw = np.where(mask > 0, np.exp(shifted), 0.0)
    total = expw.sum(axis=1, keepdims=True)
    return _safe_div(expw, total)


def log_sigmoid_loss(
    pos_score: np.ndarray,
    neg_scores: np.ndarray,
    margin: float,
    temperature: float,
    mask: Optional[np.ndarray] = None,
) -> LossResult:
    """Margin-shifted log-sigmoid loss with self-adversarial negative weights."""
    _check_negatives(neg_scores)
    weights = adversarial_weights(neg_scores, temperature, mask)
    loss = _softplus(-margin - pos_score) + (
        weights * _softplus(margin + neg_scores)
    ).sum(axis=1)
    dpos = -expit(-margin - pos_score)
    dneg = weights * expit(margin + neg_scores)
    return LossResult(loss, dpos, dneg, weights)


def sampled_softmax_ce_loss(
    pos_score: np.ndarray,
    neg_scores: np.ndarray,
    entity_count: int,
    mask: Optional[np.ndarray] = None,
) -> LossResult:
    """Cross entropy whose log-sum-exp over the vocabulary is estimated from
    the negatives with correction log((entity_count - 1) / negative_count)."""
    _check_negatives(neg_scores)
    if entity_count < 2:
        raise ConfigError("entity_count must be >= 2 for sampled softmax")
    n = neg_scores.shape[1]
    correction = np.log((entity_count - 1) / n)
    corrected = neg_scores + correction
    if mask is None:
        mask = np.ones_like(neg_scores)
    hi = np.maximum(
        pos_score,
        np.max(np.where(mask > 0, corrected, -np.inf), axis=1, initial=-np.inf),
    )
    pos_exp = np.exp(pos_score - hi)
    neg_exp = np.where(mask > 0, np.exp(corrected - hi[:, None]), 0.0)
    z = hi + np.log(pos_exp + neg_exp.sum(axis=1))
    loss = -pos_score + z
    dpos = -1.0 + np.exp(pos_score - z)
    dneg = np.exp(corrected - z[:, None]) * mask
    return LossResult(loss, dpos, dneg)


# ---------------------------------------------------------------------------
# Regularisation
# ---------------------------------------------------------------------------


def l3_penalty(x: np.ndarray, plain_norm: bool = False):
    """Per-row penalty and its gradient.

    Default penalises sum_i |x_i|^3 (elementwise-separable); the plain-norm
    variant penalises (sum_i |x_i|^3)^(1/3) itself.
    """
    ax = np.abs(x)
    cubes = (ax * ax * ax).sum(axis=-1)
    if not plain_norm:
        return cubes, 3.0 * x * ax
    val = np.cbrt(cubes)
    grad = _safe_div(x * ax, (val * val)[..., None])
    return val, grad


def l3_regulariser(
    final_embeddings: list[np.ndarray],
    shallow_embeddings: list[np.ndarray],
    feature_projections: list[np.ndarray],
    weight_embedding: float,
    weight_shallow: float,
    weight_feature: float,
    plain_norm: bool = False,
) -> float:
    """Weighted sum of the three penalty groups (values only, no gradients)."""
    total = 0.0
    for weight, group in (
        (weight_embedding, final_embeddings),
        (weight_shallow, shallow_embeddings),
        (weight_feature, feature_projections),
    ):
        if weight == 0.0:
            continue
        for arr in group:
            vals, _ = l3_penalty(arr, plain_norm)
            total += weight * float(vals.sum())
    return total


# ---------------------------------------------------------------------------
# Micro-batch forward/backward
# ---------------------------------------------------------------------------


@dataclass
class BatchInputs:
    """One micro-batch with shared negative tails (broadcast semantics)."""

    head_shallow: np.ndarray  # [B, d]
    tail_shallow: np.ndarray  # [B, d]
    neg_shallow: np.ndarray  # [N, d]
    relations: np.ndarray  # [B, k]
    normals: Optional[np.ndarray] = None  # [B, d] raw rows (TransH)
    head_features: Optional[np.ndarray] = None  # [B, F]
    tail_features: Optional[np.ndarray] = None  # [B, F]
    neg_features: Optional[np.ndarray] = None  # [N, F]
    proj_head: Optional[np.ndarray] = None  # [d, F]
    proj_tail: Optional[np.ndarray] = None  # [d, F]
    head_dropout: Optional[np.ndarray] = None  # [B, d] 0/1 mask
    tail_dropout: Optional[np.ndarray] = None
    neg_dropout: Optional[np.ndarray] = None
    negative_mask: Optional[np.ndarray] = None  # [B, N], 0 drops a negative
    entity_count: Optional[int] = None  # vocabulary size, sampled softmax only


@dataclass
class BatchGrads:
    head_shallow: np.ndarray
    tail_shallow: np.ndarray
    neg_shallow: np.ndarray
    relations: np.ndarray
    normals: Optional[np.ndarray]
    proj_head: Optional[np.ndarray]
    proj_tail: Optional[np.ndarray]


@dataclass
class BatchResult:
    objective: float  # mean data loss + scaled regularisation
    data_loss: float
    reg_value: float
    grads: BatchGrads
    pos_scores: np.ndarray = field(repr=False, default=None)


def _encode_branch(shallow, features, proj, mask, rate):
    """Returns (embedding, raw projection, scaled mask) for one entity role."""
    if features is None or proj is None:
        return shallow, None, None
    raw = features @ proj.T
    if mask is not None and rate > 0.0:
        scaled = mask / (1.0 - rate)
        return shallow + raw * scaled, raw, scaled
    return shallow + raw, raw, None


def batch_forward_backward(inputs: BatchInputs, config: ModelConfig) -> BatchResult:
    """Forward and analytic backward pass over one micro-batch.

    The objective is the mean of the per-positive loss plus the regularisation
    term scaled by 1/B. Gradients of the shared negatives accumulate the
    contributions of every positive; rows are per batch position (the caller
    sums duplicates before the optimiser update).
    """
    batch = inputs.head_shallow.shape[0]
    rate = config.feature_dropout

    h, raw_h, mask_h = _encode_branch(
        inputs.head_shallow, inputs.head_features, inputs.proj_head,
        inputs.head_dropout, rate,
    )
    t, raw_t, mask_t = _encode_branch(
        inputs.tail_shallow, inputs.tail_features, inputs.proj_tail,
        inputs.tail_dropout, rate,
    )
    negs, raw_n, mask_n = _encode_branch(
        inputs.neg_shallow, inputs.neg_features, inputs.proj_tail,
        inputs.neg_dropout, rate,
    )

    scorer = get_scorer(config)
    pos_scores, pos_cache = scorer.pos(h, inputs.relations, t, inputs.normals)
    neg_scores, neg_cache = scorer.neg(h, inputs.relations, negs, inputs.normals)

    if config.loss == "log_sigmoid":
        loss = log_sigmoid_loss(
            pos_scores, neg_scores, config.margin,
            config.adversarial_temperature, inputs.negative_mask,
        )
    else:
        if inputs.entity_count is None:
            raise ConfigError("sampled softmax loss requires BatchInputs.entity_count")
        loss = sampled_softmax_ce_loss(
            pos_scores, neg_scores, inputs.entity_count, inputs.negative_mask,
        )

    inv_b = 1.0 / batch
    dh, dr, dt, dw = scorer.pos_backward(pos_cache, loss.dpos * inv_b)
    dh2, dr2, dnegs, dw2 = scorer.neg_backward(neg_cache, loss.dneg * inv_b)
    dh += dh2
    dr += dr2
    if dw is not None:
        dw += dw2

    reg_value = 0.0
    plain = config.reg_plain_norm
    if config.reg_embedding > 0.0:
        scale = config.reg_embedding * inv_b
        for emb, grad in ((h, dh), (t, dt), (negs, dnegs)):
            vals, g = l3_penalty(emb, plain)
            reg_value += scale * float(vals.sum())
            grad += scale * g

    d_head_shallow, d_proj_h = _encoder_backward(
        dh, inputs.head_features, mask_h
    )
    d_tail_shallow, d_proj_t1 = _encoder_backward(
        dt, inputs.tail_features, mask_t
    )
    d_neg_shallow, d_proj_t2 = _encoder_backward(
        dnegs, inputs.neg_features, mask_n
    )
    d_proj_tail = _add_opt(d_proj_t1, d_proj_t2)

    if config.reg_shallow > 0.0:
        scale = config.reg_shallow * inv_b
        for shallow, grad in (
            (inputs.head_shallow, d_head_shallow),
            (inputs.tail_shallow, d_tail_shallow),
            (inputs.neg_shallow, d_neg_shallow),
        ):
            vals, g = l3_penalty(shallow, plain)
            reg_value += scale * float(vals.sum())
            grad += scale * g

    if config.reg_feature > 0.0 and raw_h is not None:
        scale = config.reg_feature * inv_b
        for raw, feats, role in (
            (raw_h, inputs.head_features, "head"),
            (raw_t, inputs.tail_features, "tail"),
            (raw_n, inputs.neg_features, "tail"),
        ):
            vals, g = l3_penalty(raw, plain)
            reg_value += scale * float(vals.sum())
            contrib = scale * (g.T @ feats)
            if role == "head":
                d_proj_h = _add_opt(d_proj_h, contrib)
            else:
                d_proj_tail = _add_opt(d_proj_tail, contrib)

    data_loss = float(loss.loss.mean())
    grads = BatchGrads(
        head_shallow=d_head_shallow,
        tail_shallow=d_tail_shallow,
        neg_shallow=d_neg_shallow,
        relations=dr,
        normals=dw,
        proj_head=d_proj_h,
        proj_tail=d_proj_tail,
    )
    return BatchResult(
        objective=data_loss + reg_value,
        data_loss=data_loss,
        reg_value=reg_value,
        grads=grads,
        pos_scores=pos_scores,
    )


def _encoder_backward(d_embedding, features, scaled_mask):
    """Split an embedding gradient into shallow and projection parts."""
    if features is None:
        return d_embedding.copy(), None
    d_raw = d_embedding if scaled_mask is None else d_embedding * scaled_mask
    return d_embedding.copy(), d_raw.T @ features


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b
