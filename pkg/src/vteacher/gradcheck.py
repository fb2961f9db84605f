"""Central finite-difference checks for every analytic gradient in :mod:`losses`."""

from __future__ import annotations

from typing import Callable, Dict, List

import numpy as np

from .losses import (
    Discriminator,
    consensus_loss,
    grl_backward,
    image_domain_loss,
    instance_domain_loss,
)
from .saliency import FeatureMap, SaliencyMatrix, reweight_backward, reweight_features

STEP = 1e-6
TOLERANCE = 1e-5


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def random_instance(rng: np.random.Generator) -> dict:
    num_scales = int(rng.integers(1, 4))
    channels = [int(rng.integers(1, 9)) for _ in range(num_scales)]
    feats, sal = [], []
    for c in channels:
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        feats.append(rng.normal(0.0, 1.0, (c, h, w)))
        m = rng.uniform(0.0, 1.0, (h, w)) * (rng.uniform(size=(h, w)) < 0.6)
        sal.append(m)
    return {
        "features": feats,
        "saliency": sal,
        "disc": Discriminator.random(channels, rng),
        "domain": int(rng.integers(0, 2)),
    }


def check_instance(inst: dict, lambda_d: float = 0.1) -> Dict[str, float]:
    """Relative errors of every gradient block for one random instance.

    Also records ``grl`` as the max absolute deviation of the backbone
    gradients from ``-lambda_d * feature_grad`` (expected to be exactly 0).
    """
    feats: List[np.ndarray] = [f.copy() for f in inst["features"]]
    sal = [SaliencyMatrix(1, m) for m in inst["saliency"]]
    disc: Discriminator = inst["disc"].copy()
    domain = inst["domain"]
    errors: Dict[str, float] = {}

    def reweighted():
        return [reweight_features(FeatureMap(1, f), m).tensor for f, m in zip(feats, sal)]

    def record(name, analytic, fn, target):
        errors[name] = max(errors.get(name, 0.0), rel_error(analytic, numeric_grad(fn, target)))

    img = image_domain_loss(feats, disc, domain, lambda_d)
    for s in range(len(feats)):
        record("img/disc", img.disc_grad.img[s], lambda: image_domain_loss(feats, disc, domain).loss, disc.img[s])
        record("img/features", img.feature_grad[s], lambda: image_domain_loss(feats, disc, domain).loss, feats[s])

    rw = reweighted()
    ins = instance_domain_loss(rw, disc, domain, lambda_d, sal)
    for s in range(len(feats)):
        fn = lambda: instance_domain_loss(reweighted(), disc, domain).loss  # noqa: E731
        record("ins/disc", ins.disc_grad.ins[s], fn, disc.ins[s])
        record("ins/features", reweight_backward(ins.feature_grad[s], sal[s]), fn, feats[s])
        fn_rw = lambda: instance_domain_loss(rw, disc, domain).loss  # noqa: E731
        record("ins/reweighted", ins.feature_grad[s], fn_rw, rw[s])

    con = consensus_loss(feats, reweighted(), disc, sal)
    for s in range(len(feats)):
        fn = lambda: consensus_loss(feats, reweighted(), disc).loss  # noqa: E731
        record("con/disc_img", con.disc_grad.img[s], fn, disc.img[s])
        record("con/disc_ins", con.disc_grad.ins[s], fn, disc.ins[s])
        record("con/features", con.backbone_grad[s], fn, feats[s])

    grl_dev = 0.0
    for fg, bg in zip(img.feature_grad, img.backbone_grad):
        grl_dev = max(grl_dev, float(np.max(np.abs(bg - (-lambda_d) * fg))))
    for s, (fg, bg) in enumerate(zip(ins.feature_grad, ins.backbone_grad)):
        expected = (1.0 + sal[s].grid)[None] * (-lambda_d * fg)
        grl_dev = max(grl_dev, float(np.max(np.abs(bg - expected))))
    errors["grl"] = grl_dev
    return errors


def run_suite(num_instances: int = 20, seed: int = 0, lambda_d: float = 0.1, tol: float = TOLERANCE) -> dict:
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(num_instances):
        for name, err in check_instance(random_instance(rng), lambda_d).items():
            worst[name] = max(worst.get(name, 0.0), err)
    passed = all(v < tol for k, v in worst.items() if k != "grl") and worst.get("grl", 0.0) == 0.0
    return {
        "instances": num_instances,
        "seed": seed,
        "step": STEP,
        "tolerance": tol,
        "lambda_d": lambda_d,
        "max_rel_error": worst,
        "passed": passed,
    }
