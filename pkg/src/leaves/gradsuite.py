"""Finite-difference gradient suite over every differentiable operation and the composed pipeline.

Each check builds a fresh problem from a seeded generator and compares the tape
gradients with central differences. Loss-only checks use a tighter tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import augment
from . import autodiff as ad
from .augment import AugmentBounds, AugmentParams, NoiseBundle
from .autodiff import Tensor
from .contrastive import EmbeddingBatch, nt_xent
from .encoder import Encoder, EncoderConfig, cross_entropy

OP_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Check:
    name: str
    build: Callable  # rng -> (f, inputs)
    loss_only: bool = False
    steps: tuple[float, ...] = (1e-5,)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _binary(kind):
    def build(rng):
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(1, 4)))
        if kind == "div":
            b = _t(_positive(rng, (1, 4)) * rng.choice([-1, 1], (1, 4)))
        return (lambda a, b: ad.elementwise(kind, a, b)), [a, b]

    return build


def _unary(kind):
    def build(rng):
        if kind in ("log", "sqrt"):
            x = _positive(rng, (3, 5))
        elif kind == "relu":
            x = rng.normal(size=(3, 5))
            x[np.abs(x) < 0.05] += 0.2  # keep away from the kink
        else:
            x = rng.normal(size=(3, 5))
        return (lambda x: ad.map_op(kind, x)), [_t(x)]

    return build


def _reduce(kind):
    def build(rng):
        x = _t(rng.normal(size=(3, 4, 5)))
        return (lambda x: ad.reduce(kind, x, axis=1)), [x]

    return build


def _matmul(rng):
    return ad.matmul, [_t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))]


def _conv1d(rng):
    stride = int(rng.integers(1, 3))
    x, w = _t(rng.normal(size=(2, 3, 11))), _t(rng.normal(size=(4, 3, 3)))
    return (lambda x, w: ad.conv1d(x, w, stride=stride, padding=1)), [x, w]


def _interp1d(rng):
    signal = _t(rng.normal(size=(2, 1, 9)))
    # off-grid locations so the piecewise-linear kinks are not straddled
    grid = np.linspace(-1, 1, 9)
    loc = rng.uniform(-0.95, 0.95, (2, 1, 7))
    nearest = grid[np.argmin(np.abs(loc[..., None] - grid), axis=-1)]
    loc = np.where(np.abs(loc - nearest) < 0.02, loc + 0.05, loc)
    return ad.interp1d, [signal, _t(loc)]


def _sort(rng):
    x = _t(rng.permutation(12).reshape(2, 6) + rng.uniform(-0.2, 0.2, (2, 6)))
    return (lambda x: ad.sort_lastaxis(x)[0]), [x]


def _logsumexp(rng):
    return (lambda x: ad.logsumexp(x, axis=1)), [_t(rng.normal(size=(3, 5)))]


def _softmax(rng):
    return (lambda x: ad.softmax(x, axis=1)), [_t(rng.normal(size=(3, 5)))]


def _shape_ops(rng):
    def f(a, b):
        cat = ad.concat([a, b], axis=0)
        return ad.take(ad.transpose(ad.reshape(cat, (4, 6, 2)), (1, 0, 2)), np.array([2, 0, 2]), axis=0)

    return f, [_t(rng.normal(size=(2, 12))), _t(rng.normal(size=(2, 12)))]


def _reparam_normal(rng):
    eps = augment.open_uniform(rng, (3, 4))
    inputs = [_t(rng.normal(size=(3, 4))), _t(_positive(rng, (3, 4)))]
    return (lambda mu, s: augment.reparam_normal(mu, s, eps)), inputs


def _reparam_uniform(rng):
    eps = rng.random((3, 4))
    low = rng.normal(size=4)
    return (lambda lo, hi: augment.reparam_uniform(lo, hi, eps)), [_t(low), _t(low + _positive(rng, 4))]


def _relaxed_bernoulli(rng):
    eps = augment.open_uniform(rng, (6,))
    p = _t(rng.uniform(0.2, 0.8, 6))
    return (lambda p: augment.reparam_relaxed_bernoulli(p, 0.5, eps)), [p]


def _signal(rng, n=2, c=2, length=16):
    return _t(rng.normal(size=(n, c, length)))


def _jitter(rng):
    x = _signal(rng)
    eps = augment.open_uniform(rng, x.shape)
    return (lambda x, s: augment.jitter(x, s, eps)), [x, _t(rng.uniform(0.01, 0.05))]


def _scale(rng):
    x = _signal(rng)
    eps = augment.open_uniform(rng, x.shape[:2])
    return (lambda x, s: augment.scale(x, s, eps)), [x, _t(rng.uniform(0.01, 0.05))]


def _mag_warp(rng):
    x = _signal(rng)
    eps = augment.open_uniform(rng, x.shape[:2] + (6,))
    return (lambda x, s: augment.mag_warp(x, s, eps)), [x, _t(rng.uniform(0.01, 0.05))]


def _augment_params(rng, m=3) -> AugmentParams:
    params = AugmentParams.init(AugmentBounds(m=m))
    for t in params.tensors():
        t.data = t.data + rng.normal(0, 0.2, t.shape)
    return params


def _time_distort(rng):
    x = _signal(rng, length=12)
    params = _augment_params(rng)
    nb = NoiseBundle.draw(int(rng.integers(2**31)), x.shape, params.bounds)
    inputs = [x, params.gmm_weights_raw, params.gmm_means_raw, params.gmm_scales_raw]
    return (lambda *_: augment.time_distort(x, params, nb.gmm_normal, nb.gmm_choice)), inputs


def _permute(rng):
    x = _signal(rng, length=15)
    keys = rng.random((2, 5))
    n = int(rng.integers(1, 6))
    return (lambda x: augment.permute_fixed(x, n, keys)), [x]


def _small_encoder(rng) -> Encoder:
    cfg = EncoderConfig(channels_in=1, widths=(4, 6), strides=(1, 2), stem_kernel=5, embed_dim=6,
                        projection_dim=3, num_classes=2)
    enc = Encoder(cfg, seed=int(rng.integers(2**31)))
    for name in ("proj1.b", "proj2.b"):  # zero biases can collapse a 3-d embedding to the origin
        enc.params[name].data = rng.normal(0, 0.5, enc.params[name].shape)
    return enc


def _encoder_blocks(rng):
    enc = _small_encoder(rng)
    x = _t(rng.normal(size=(2, 1, 16)))
    return (lambda *_: enc.forward(x)), [x, enc.params["stem.w"], enc.params["block1.conv2.w"],
                                          enc.params["block1.short.w"]]


def _projection(rng):
    enc = _small_encoder(rng)
    z = _t(rng.normal(size=(4, 6)))
    return (lambda *_: enc.project(z)), [z, enc.params["proj1.w"], enc.params["proj2.b"]]


def _nt_xent(rng):
    n = int(rng.choice([2, 4, 8]))
    z = _t(rng.normal(size=(n, 4)))
    return (lambda z: nt_xent(EmbeddingBatch(z, 0.05))), [z]


def _cross_entropy(rng):
    labels = rng.integers(0, 3, 5)
    return (lambda l: cross_entropy(l, labels)), [_t(rng.normal(size=(5, 3)))]


def _pipeline(rng):
    """LEAVES views -> encoder -> projection -> NT-Xent, differentiated w.r.t. both players."""
    enc = _small_encoder(rng)
    params = _augment_params(rng)
    x = Tensor(rng.normal(size=(2, 1, 16)))
    seed = int(rng.integers(2**31))
    noises = [NoiseBundle.draw(seed + v, x.shape, params.bounds) for v in (0, 1)]

    def f(*_):
        views = [augment.leaves_forward(x, params, nb) for nb in noises]
        z = enc.project(enc.forward(ad.concat(views, axis=0)))
        z = ad.take(z, np.array([0, 2, 1, 3]), axis=0)
        return nt_xent(EmbeddingBatch(z, 0.05))

    # raw_perm only reaches the loss through a straight-through surrogate; it is not checked here
    smooth = [params.raw_sigma_j, params.raw_sigma_s, params.raw_sigma_m,
              params.gmm_weights_raw, params.gmm_means_raw, params.gmm_scales_raw]
    return f, smooth + [enc.params["stem.w"], enc.params["proj2.w"]]


CHECKS: tuple[Check, ...] = (
    *(Check(k, _binary(k)) for k in ("add", "sub", "mul", "div")),
    *(Check(k, _unary(k)) for k in ("exp", "log", "sqrt", "tanh", "relu", "logistic")),
    *(Check(f"reduce_{k}", _reduce(k)) for k in ("sum", "mean", "max")),
    Check("matmul", _matmul),
    Check("conv1d", _conv1d),
    Check("interp1d", _interp1d),
    Check("sort", _sort),
    Check("logsumexp", _logsumexp),
    Check("softmax", _softmax),
    Check("shape_ops", _shape_ops),
    Check("reparam_normal", _reparam_normal),
    Check("reparam_uniform", _reparam_uniform),
    Check("relaxed_bernoulli", _relaxed_bernoulli),
    Check("jitter", _jitter),
    Check("scale", _scale),
    Check("mag_warp", _mag_warp),
    Check("time_distort", _time_distort),
    Check("permute", _permute),
    Check("encoder", _encoder_blocks),
    Check("projection", _projection),
    Check("nt_xent", _nt_xent, loss_only=True),
    Check("cross_entropy", _cross_entropy, loss_only=True),
    # relu, interpolation-grid and sort kinks are dense in the composed graph: shorter steps, and a
    # coordinate counts as matching if either step avoids straddling a kink
    Check("pipeline", _pipeline, steps=(1e-6, 1e-7)),
)


def run_check(check: Check, seed: int, tolerance: float | None = None) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, check.name))])
    f, inputs = check.build(rng)
    errors = None
    for step in check.steps:
        errs = ad.grad_errors(f, inputs, step=step, seed=seed)
        errors = errs if errors is None else [np.minimum(a, b) for a, b in zip(errors, errs)]
    worst = max(float(e.max()) if e.size else 0.0 for e in errors)
    if tolerance is None:
        tolerance = LOSS_TOLERANCE if check.loss_only else OP_TOLERANCE
    return CheckResult(check.name, seed, worst, tolerance)


def run_suite(seeds=range(20), tolerance: float | None = None, checks=CHECKS) -> list[CheckResult]:
    return [run_check(c, s, tolerance) for c in checks for s in seeds]


def summarize(results: list[CheckResult]) -> dict:
    """Worst result per check name plus the overall worst offender (by error / tolerance)."""
    per_check: dict[str, CheckResult] = {}
    for r in results:
        if r.name not in per_check or r.error > per_check[r.name].error:
            per_check[r.name] = r
    worst = max(results, key=lambda r: r.error / r.tolerance)
    failed = sorted({r.name for r in results if not r.passed})
    return {"per_check": per_check, "worst": worst, "failed": failed}


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_suite()
    summary = summarize(res)
    for name, r in summary["per_check"].items():
        print(f"{name:18s} {r.error:.3e} (tol {r.tolerance:g})")
    print(f"{len(res)} checks in {time.perf_counter() - t0:.1f}s; failed: {summary['failed']}")
