"""Detection-loss aggregation and the adversarial alignment losses.

The discriminator is deliberately minimal so every gradient can be written
by hand and checked against finite differences. Per scale it has two
logistic heads over the channel axis:

* image head: global average pool over the grid, then ``sigmoid(w . g + b)``;
* instance head: ``sigmoid(w . f[:, u, v] + b)`` at every cell (a 1x1 conv).

Domain losses are binary cross-entropy and are returned as positive numbers,
which is what the discriminator descends. The feature extractor receives
the reversed gradient ``-lambda_d * dL/df`` (see :func:`grl_backward`).
The consensus term is a squared difference of the two heads' probabilities
and is not reversed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import RangeError, ShapeMismatch
from .saliency import FeatureMap, SaliencyMatrix, reweight_backward, reweight_features

SOURCE = 0
TARGET = 1


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_d: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise RangeError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class Discriminator:
    """Per-scale head parameters, each a ``(C + 1,)`` array laid out as
    ``[w_0 .. w_{C-1}, bias]``."""

    img: List[np.ndarray]
    ins: List[np.ndarray]

    def __post_init__(self):
        self.img = [np.asarray(p, dtype=np.float64) for p in self.img]
        self.ins = [np.asarray(p, dtype=np.float64) for p in self.ins]
        if len(self.img) != len(self.ins):
            raise ShapeMismatch("image and instance heads must cover the same scales")
        for a, b in zip(self.img, self.ins):
            if a.ndim != 1 or a.shape != b.shape or a.size < 2:
                raise ShapeMismatch(f"head parameter shapes {a.shape} / {b.shape} are not (C+1,)")

    @classmethod
    def zeros(cls, channels: Sequence[int]) -> "Discriminator":
        return cls([np.zeros(c + 1) for c in channels], [np.zeros(c + 1) for c in channels])

    @classmethod
    def random(cls, channels: Sequence[int], rng: np.random.Generator, scale: float = 0.5) -> "Discriminator":
        return cls(
            [rng.normal(0.0, scale, c + 1) for c in channels],
            [rng.normal(0.0, scale, c + 1) for c in channels],
        )

    @property
    def channels(self) -> List[int]:
        return [p.size - 1 for p in self.img]

    def copy(self) -> "Discriminator":
        return Discriminator([p.copy() for p in self.img], [p.copy() for p in self.ins])

    def flat(self) -> np.ndarray:
        """All parameters in one vector: per scale, image head then instance head."""
        parts = []
        for a, b in zip(self.img, self.ins):
            parts += [a, b]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, values: np.ndarray, channels: Sequence[int]) -> "Discriminator":
        values = np.asarray(values, dtype=np.float64)
        expected = sum(2 * (c + 1) for c in channels)
        if values.size != expected:
            raise ShapeMismatch(f"expected {expected} parameters for channels {list(channels)}, got {values.size}")
        img, ins, pos = [], [], 0
        for c in channels:
            img.append(values[pos:pos + c + 1].copy())
            pos += c + 1
            ins.append(values[pos:pos + c + 1].copy())
            pos += c + 1
        return cls(img, ins)

    def image_prob(self, s: int, f: np.ndarray) -> float:
        return float(_sigmoid(_image_logit(self.img[s], f)))

    def instance_prob(self, s: int, f: np.ndarray) -> np.ndarray:
        return _sigmoid(_instance_logit(self.ins[s], f))


@dataclass
class LossResult:
    """A loss value with its gradients.

    ``disc_grad`` mirrors the discriminator layout (untouched heads are
    zero). ``feature_grad`` is dL/d(input) per scale; for the instance loss
    the input is the reweighted map. ``backbone_grad`` is what flows back
    into the feature extractor: reversed and scaled for the domain losses,
    plain for consensus, and pushed through the reweighting when a saliency
    matrix was supplied. ``reweighted_grad`` is set by the consensus loss only.
    """

    loss: float
    disc_grad: Discriminator
    feature_grad: List[np.ndarray]
    backbone_grad: List[np.ndarray]
    reweighted_grad: Optional[List[np.ndarray]] = None
    per_scale: List[float] = field(default_factory=list)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _bce_logits(z, d):
    # softplus(z) - d*z == -(d log p + (1-d) log(1-p)), stable for large |z|
    return np.logaddexp(0.0, z) - d * z


def _image_logit(params, f):
    g = f.mean(axis=(1, 2))
    return float(params[:-1] @ g + params[-1])


def _instance_logit(params, f):
    return np.tensordot(params[:-1], f, axes=(0, 0)) + params[-1]


def _tensors(maps) -> List[np.ndarray]:
    out = []
    for m in maps:
        t = m.tensor if isinstance(m, FeatureMap) else np.asarray(m, dtype=np.float64)
        if t.ndim != 3:
            raise ShapeMismatch(f"feature tensor must be C x H x W, got shape {t.shape}")
        out.append(np.asarray(t, dtype=np.float64))
    return out


def _check_disc(fs, disc):
    if len(fs) != len(disc.img):
        raise ShapeMismatch(f"{len(fs)} feature scales but discriminator has {len(disc.img)}")
    for s, (f, c) in enumerate(zip(fs, disc.channels)):
        if f.shape[0] != c:
            raise ShapeMismatch(f"scale {s}: features have {f.shape[0]} channels, discriminator {c}")


def _domain_grid(domain, s, shape):
    d = domain[s] if isinstance(domain, (list, tuple)) else domain
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 0:
        d = np.full(shape, float(d))
    if d.shape != shape:
        raise ShapeMismatch(f"scale {s}: domain grid {d.shape} vs feature grid {shape}")
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("domain labels must be 0 (source) or 1 (target)")
    return d


def detection_loss(l_bbox: float, l_obj: float, l_cls: float, w: LossWeights = LossWeights()) -> float:
    """Weighted sum of box, objectness and classification losses. Serves both
    the supervised source loss and the pseudo-labelled target loss."""
    return w.lambda1 * l_bbox + w.lambda2 * l_obj + w.lambda3 * l_cls


def total_loss(l_sup, l_unsup, l_img, l_ins, l_con, w: LossWeights = LossWeights()) -> float:
    return l_sup + l_unsup + w.lambda_d * (l_img + l_ins + l_con)


def grl_backward(upstream_grad, lambda_d: float):
    """Gradient reversal: identity forward, ``-lambda_d * g`` backward."""
    return -lambda_d * np.asarray(upstream_grad)


def image_domain_loss(features, disc: Discriminator, domain: int, lambda_d: float = 0.1) -> LossResult:
    fs = _tensors(features)
    _check_disc(fs, disc)
    if domain not in (SOURCE, TARGET):
        raise ValueError("domain label must be 0 (source) or 1 (target)")
    grad = Discriminator.zeros(disc.channels)
    feat, total, per_scale = [], 0.0, []
    for s, f in enumerate(fs):
        C, H, W = f.shape
        params = disc.img[s]
        g = f.mean(axis=(1, 2))
        z = params[:-1] @ g + params[-1]
        loss = float(_bce_logits(z, domain))
        dz = float(_sigmoid(z)) - domain
        grad.img[s][:-1] = dz * g
        grad.img[s][-1] = dz
        feat.append(np.broadcast_to((dz * params[:-1] / (H * W))[:, None, None], f.shape).copy())
        total += loss
        per_scale.append(loss)
    return LossResult(total, grad, feat, [grl_backward(g, lambda_d) for g in feat], per_scale=per_scale)


def instance_domain_loss(
    reweighted,
    disc: Discriminator,
    domain: Union[int, Sequence[np.ndarray]],
    lambda_d: float = 0.1,
    saliency: Optional[Sequence[SaliencyMatrix]] = None,
) -> LossResult:
    """Per-cell BCE of the instance head on reweighted features.

    With ``saliency`` given, ``backbone_grad`` is taken with respect to the
    features *before* reweighting, i.e. multiplied by ``1 + m`` per cell.
    """
    fs = _tensors(reweighted)
    _check_disc(fs, disc)
    grad = Discriminator.zeros(disc.channels)
    feat, backbone, total, per_scale = [], [], 0.0, []
    for s, f in enumerate(fs):
        params = disc.ins[s]
        d = _domain_grid(domain, s, f.shape[1:])
        z = _instance_logit(params, f)
        loss = float(_bce_logits(z, d).sum())
        dz = _sigmoid(z) - d
        grad.ins[s][:-1] = np.tensordot(f, dz, axes=([1, 2], [0, 1]))
        grad.ins[s][-1] = dz.sum()
        gf = params[:-1][:, None, None] * dz[None, :, :]
        feat.append(gf)
        # features -> reweight -> GRL -> head, so reverse first, then chain through (1 + m)
        rev = grl_backward(gf, lambda_d)
        backbone.append(reweight_backward(rev, saliency[s]) if saliency is not None else rev)
        total += loss
        per_scale.append(loss)
    return LossResult(total, grad, feat, backbone, per_scale=per_scale)


def consensus_loss(
    features,
    reweighted,
    disc: Discriminator,
    saliency: Optional[Sequence[SaliencyMatrix]] = None,
) -> LossResult:
    """Sum over cells of ``(instance_prob(u, v) - image_prob)^2``.

    ``feature_grad`` is the gradient through the image head, ``reweighted_grad``
    through the instance head. ``backbone_grad`` adds both, sending the
    instance part through the reweighting when ``saliency`` is given.
    """
    fs, rs = _tensors(features), _tensors(reweighted)
    _check_disc(fs, disc)
    _check_disc(rs, disc)
    grad = Discriminator.zeros(disc.channels)
    feat, rew, backbone, total, per_scale = [], [], [], 0.0, []
    for s, (f, r) in enumerate(zip(fs, rs)):
        if f.shape != r.shape:
            raise ShapeMismatch(f"scale {s}: features {f.shape} vs reweighted {r.shape}")
        C, H, W = f.shape
        pi, pr = disc.img[s], disc.ins[s]
        g = f.mean(axis=(1, 2))
        q = float(_sigmoid(pi[:-1] @ g + pi[-1]))
        p = _sigmoid(_instance_logit(pr, r))
        diff = p - q
        loss = float((diff ** 2).sum())

        dz_ins = 2.0 * diff * p * (1.0 - p)
        grad.ins[s][:-1] = np.tensordot(r, dz_ins, axes=([1, 2], [0, 1]))
        grad.ins[s][-1] = dz_ins.sum()
        gr = pr[:-1][:, None, None] * dz_ins[None, :, :]

        dz_img = -2.0 * diff.sum() * q * (1.0 - q)
        grad.img[s][:-1] = dz_img * g
        grad.img[s][-1] = dz_img
        gf = np.broadcast_to((dz_img * pi[:-1] / (H * W))[:, None, None], f.shape).copy()

        feat.append(gf)
        rew.append(gr)
        backbone.append(gf + (reweight_backward(gr, saliency[s]) if saliency is not None else gr))
        total += loss
        per_scale.append(loss)
    return LossResult(total, grad, feat, backbone, reweighted_grad=rew, per_scale=per_scale)


def adversarial_breakdown(
    features: Sequence[FeatureMap],
    saliency: Sequence[SaliencyMatrix],
    disc: Discriminator,
    domain: int,
    weights: LossWeights = LossWeights(),
    l_sup: float = 0.0,
    l_unsup: float = 0.0,
) -> dict:
    """Reweight each scale, evaluate all three alignment losses, and combine
    them with the detection terms into the total objective."""
    if len(features) != len(saliency):
        raise ShapeMismatch(f"{len(features)} feature scales but {len(saliency)} saliency matrices")
    reweighted = [reweight_features(f, m) for f, m in zip(features, saliency)]
    l_img = image_domain_loss(features, disc, domain, weights.lambda_d)
    l_ins = instance_domain_loss(reweighted, disc, domain, weights.lambda_d, saliency)
    l_con = consensus_loss(features, reweighted, disc, saliency)
    return {
        "domain": "source" if domain == SOURCE else "target",
        "lambda_d": weights.lambda_d,
        "l_img": l_img.loss,
        "l_ins": l_ins.loss,
        "l_con": l_con.loss,
        "per_scale": {"l_img": l_img.per_scale, "l_ins": l_ins.per_scale, "l_con": l_con.per_scale},
        "l_sup": l_sup,
        "l_unsup": l_unsup,
        "total": total_loss(l_sup, l_unsup, l_img.loss, l_ins.loss, l_con.loss, weights),
    }
