"""Differentiable time-series augmentations with learnable, bounded intensities.

A view is produced by chaining jitter, scale, magnitude warp, time distortion
and segment permutation, in that order. Every random draw comes from a
:class:`NoiseBundle` of uniforms, so for a fixed bundle the view is a
deterministic, differentiable function of :class:`AugmentParams`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from .autodiff import Tensor

_TWO53 = float(2**53)


@dataclass(frozen=True)
class AugmentBounds:
    eta: float = 0.05
    k_max: int = 5
    m: int = 6
    knots: int = 8
    temperature: float = 0.01

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.k_max < 1 or self.m < 1 or self.knots < 2:
            raise ValueError("k_max, m must be >= 1 and knots >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


SCALAR_NAMES = ("raw_sigma_j", "raw_sigma_s", "raw_sigma_m", "raw_perm")
VECTOR_NAMES = ("gmm_weights_raw", "gmm_means_raw", "gmm_scales_raw")


@dataclass
class AugmentParams:
    """Unconstrained learnable values plus the fixed bounds that map them to effective ones."""

    raw_sigma_j: Tensor
    raw_sigma_s: Tensor
    raw_sigma_m: Tensor
    raw_perm: Tensor
    gmm_weights_raw: Tensor
    gmm_means_raw: Tensor
    gmm_scales_raw: Tensor
    bounds: AugmentBounds = field(default_factory=AugmentBounds)

    @classmethod
    def init(cls, bounds: AugmentBounds | None = None) -> "AugmentParams":
        """Raw zeros put every intensity at eta/2 and the segment count mid-range.

        GMM components start at the centres of M equal bins on [-1, 1] with
        scale 0.3 * bin width, a near-uniform density that distorts mildly.
        """
        b = bounds or AugmentBounds()
        m = b.m
        width = 2.0 / m
        means = -1.0 + width * (np.arange(m) + 0.5)
        return cls(
            raw_sigma_j=Tensor(0.0, requires_grad=True),
            raw_sigma_s=Tensor(0.0, requires_grad=True),
            raw_sigma_m=Tensor(0.0, requires_grad=True),
            raw_perm=Tensor(0.0, requires_grad=True),
            gmm_weights_raw=Tensor(np.zeros(m), requires_grad=True),
            gmm_means_raw=Tensor(means, requires_grad=True),
            gmm_scales_raw=Tensor(np.full(m, np.log(0.3 * width)), requires_grad=True),
            bounds=b,
        )

    @classmethod
    def identity(cls, bounds: AugmentBounds | None = None) -> "AugmentParams":
        """Limit configuration: zero intensities, one segment, collapsed GMM."""
        b = bounds or AugmentBounds()
        p = cls.init(b)
        for name in SCALAR_NAMES:
            getattr(p, name).data[...] = -np.inf
        p.gmm_means_raw.data[:] = 0.0
        p.gmm_scales_raw.data[:] = -np.inf
        return p

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], bounds: AugmentBounds) -> "AugmentParams":
        return cls(**{k: Tensor(arrays[k], requires_grad=True) for k in SCALAR_NAMES + VECTOR_NAMES}, bounds=bounds)

    def named_tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in SCALAR_NAMES + VECTOR_NAMES}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def copy(self) -> "AugmentParams":
        return AugmentParams.from_arrays({k: t.data.copy() for k, t in self.named_tensors().items()}, self.bounds)

    # raw -> effective mappings
    def sigma_j(self) -> Tensor:
        return self.bounds.eta * ad.logistic(self.raw_sigma_j)

    def sigma_s(self) -> Tensor:
        return self.bounds.eta * ad.logistic(self.raw_sigma_s)

    def sigma_m(self) -> Tensor:
        return self.bounds.eta * ad.logistic(self.raw_sigma_m)

    def segments_relaxed(self) -> Tensor:
        return 1.0 + (self.bounds.k_max - 1) * ad.logistic(self.raw_perm)

    def segments(self) -> int:
        return effective_segments(self.raw_perm.data, self.bounds.k_max)

    def gmm_log_weights(self) -> Tensor:
        w = self.gmm_weights_raw
        return w - ad.logsumexp(w, axis=-1)

    def gmm_weights(self) -> Tensor:
        return ad.softmax(self.gmm_weights_raw)

    def gmm_scales(self) -> Tensor:
        return ad.exp(self.gmm_scales_raw)

    def effective(self) -> dict[str, float]:
        with _no_tape():
            return {
                "sigma_j": self.sigma_j().item(),
                "sigma_s": self.sigma_s().item(),
                "sigma_m": self.sigma_m().item(),
                "segments": self.segments(),
                "gmm_mean": float(np.mean(self.gmm_means_raw.data)),
                "gmm_scale": float(np.mean(self.gmm_scales().data)),
            }


class _no_tape:
    """Temporarily hide the active tapes so evaluations are not recorded."""

    def __enter__(self):
        self._saved = list(ad._TAPES)
        ad._TAPES.clear()

    def __exit__(self, *exc):
        ad._TAPES[:] = self._saved
        return False


def effective_segments(raw_perm, k_max: int) -> int:
    s = float(ad._logistic(np.asarray(raw_perm, dtype=np.float64)))
    return int(1 + np.rint((k_max - 1) * s))


# ------------------------------------------------------------------ noise


def open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniforms strictly inside (0, 1)."""
    return (np.floor(rng.random(shape) * _TWO53) + 0.5) / _TWO53


@dataclass
class NoiseBundle:
    """All uniform randomness consumed by one view, regenerable from ``seed``."""

    seed: int
    shape: tuple[int, int, int]
    bounds: AugmentBounds
    jitter: np.ndarray
    scale: np.ndarray
    magw: np.ndarray
    timew: np.ndarray
    gmm_normal: np.ndarray
    gmm_choice: np.ndarray
    perm_keys: np.ndarray
    perm_count: np.ndarray

    @classmethod
    def draw(cls, seed: int, shape, bounds: AugmentBounds | None = None) -> "NoiseBundle":
        b = bounds or AugmentBounds()
        n, c, length = (int(s) for s in shape)
        rng = np.random.default_rng(seed)
        return cls(
            seed=seed,
            shape=(n, c, length),
            bounds=b,
            jitter=open_uniform(rng, (n, c, length)),
            scale=open_uniform(rng, (n, c)),
            magw=open_uniform(rng, (n, c, b.knots)),
            timew=open_uniform(rng, (n, c, b.knots)),
            gmm_normal=open_uniform(rng, (n, c, length, b.m)),
            gmm_choice=open_uniform(rng, (n, c, length, b.m)),
            perm_keys=open_uniform(rng, (n, b.k_max)),
            perm_count=open_uniform(rng, (n,)),
        )

    def regenerate(self) -> "NoiseBundle":
        return NoiseBundle.draw(self.seed, self.shape, self.bounds)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            k: getattr(self, k)
            for k in ("jitter", "scale", "magw", "timew", "gmm_normal", "gmm_choice", "perm_keys", "perm_count")
        }


# -------------------------------------------------------- reparameterizations


def reparam_normal(mu, sigma, eps_uniform) -> Tensor:
    """mu + sigma * z with z the standard-normal deviate of the uniform ``eps_uniform``."""
    sigma = ad.as_tensor(sigma)
    if np.any(sigma.data < 0):
        raise ValueError("sigma must be non-negative")
    z = Tensor(ndtri(np.asarray(eps_uniform, dtype=np.float64)))
    return ad.as_tensor(mu) + sigma * z


def reparam_uniform(low, high, eps) -> Tensor:
    low, high = ad.as_tensor(low), ad.as_tensor(high)
    if np.any(low.data > high.data):
        raise ValueError(f"low {low.data} exceeds high {high.data}")
    return low + (high - low) * Tensor(eps)


def relaxed_bernoulli_logits(p, t: float, eps, form: str = "concrete") -> Tensor:
    """Pre-squash relaxed Bernoulli sample.

    ``form="concrete"`` uses the log-odds log(p) - log(1-p), so hard samples are
    1 with probability p. ``form="log_p"`` keeps only log(p) in the numerator.
    """
    p = ad.as_tensor(p)
    eps = np.asarray(eps, dtype=np.float64)
    if np.any((p.data <= 0) | (p.data >= 1)):
        raise ValueError("p must lie in the open interval (0, 1)")
    if t <= 0:
        raise ValueError("temperature must be positive")
    if np.any((eps <= 0) | (eps >= 1)):
        raise ValueError("eps must lie in the open interval (0, 1)")
    if form == "concrete":
        base = ad.log(p) - ad.log(1.0 - p)
    elif form == "log_p":
        base = ad.log(p)
    else:
        raise ValueError(f"unknown relaxed Bernoulli form {form!r}")
    return (base + Tensor(np.log(eps) - np.log1p(-eps))) / t


def reparam_relaxed_bernoulli(p, t: float, eps, form: str = "concrete") -> Tensor:
    return ad.logistic(relaxed_bernoulli_logits(p, t, eps, form))


# ------------------------------------------------------------ augmentations


def jitter(x, sigma_j, eps) -> Tensor:
    return ad.as_tensor(x) + reparam_normal(0.0, sigma_j, eps)


def scale(x, sigma_s, eps) -> Tensor:
    x = ad.as_tensor(x)
    factor = reparam_normal(1.0, sigma_s, eps)  # (N, C)
    return x * ad.reshape(factor, factor.shape + (1,))


def knot_curve(knots, length: int) -> Tensor:
    """Linearly interpolate (N, C, k) knots, evenly spaced end to end, onto ``length`` steps."""
    knots = ad.as_tensor(knots)
    grid = np.broadcast_to(np.linspace(-1.0, 1.0, length), knots.shape[:-1] + (length,))
    return ad.interp1d(knots, Tensor(grid))


def mag_warp(x, sigma_m, eps, additive: bool = False) -> Tensor:
    x = ad.as_tensor(x)
    curve = knot_curve(reparam_normal(1.0, sigma_m, eps), x.shape[-1])
    return x + curve if additive else x * curve


def time_warp_baseline(x, sigma_t: float, eps) -> np.ndarray:
    """Smooth random resampling of the time axis. Forward only."""
    if ad.active_tape() is not None:
        raise RuntimeError("time_warp_baseline has no gradient; call it outside a Tape")
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n, c, length = x.shape
    speeds = 1.0 + float(sigma_t) * ndtri(np.asarray(eps, dtype=np.float64))
    grid = np.linspace(0.0, 1.0, length)
    knot_pos = np.linspace(0.0, 1.0, speeds.shape[-1])
    out = np.empty_like(x)
    steps = np.arange(length, dtype=np.float64)
    for i in range(n):
        for j in range(c):
            warp = warp_positions(np.interp(grid, knot_pos, speeds[i, j]))
            out[i, j] = np.interp(warp, steps, x[i, j])
    return out


def warp_positions(speed: np.ndarray) -> np.ndarray:
    """Cumulative warp of a per-step speed curve, rescaled to span [0, L-1]."""
    cum = np.cumsum(speed)
    span = cum[-1] - cum[0]
    if span == 0:
        return np.arange(speed.size, dtype=np.float64)
    return (cum - cum[0]) / span * (speed.size - 1)


def gmm_samples(params: AugmentParams, eps_normal, eps_choice) -> Tensor:
    """One relaxed-categorical GMM draw per (n, c, l) from (..., M) uniforms."""
    t = params.bounds.temperature
    draws = params.gmm_means_raw + params.gmm_scales() * Tensor(ndtri(eps_normal))
    gumbel = -np.log(-np.log(eps_choice))
    mix = ad.softmax((params.gmm_log_weights() + Tensor(gumbel)) / t, axis=-1)
    return (mix * draws).sum(axis=-1)


DEGENERATE_SPAN = 1e-12


def distortion_locations(params: AugmentParams, eps_normal, eps_choice) -> tuple[Tensor, np.ndarray]:
    """Sorted GMM draws rescaled to [-1, 1].

    Returns the locations and a (N, C, 1) mask of rows whose draws collapsed to
    a point; those rows get the uniform grid instead.
    """
    samples, _ = ad.sort_lastaxis(gmm_samples(params, eps_normal, eps_choice))
    length = samples.shape[-1]
    lo = ad.take_lastaxis(samples, [0])
    hi = ad.take_lastaxis(samples, [length - 1])
    span = hi - lo
    degenerate = span.data <= DEGENERATE_SPAN
    safe_span = span + Tensor(degenerate.astype(np.float64))
    lam = 2.0 * (samples - lo) / safe_span - 1.0
    if degenerate.any():
        uniform = np.broadcast_to(np.linspace(-1.0, 1.0, length), lam.shape)
        keep = Tensor((~degenerate).astype(np.float64))
        lam = lam * keep + Tensor(np.where(degenerate, uniform, 0.0))
    return lam, degenerate


def time_distort(x, params: AugmentParams, eps_normal, eps_choice) -> Tensor:
    x = ad.as_tensor(x)
    lam, degenerate = distortion_locations(params, eps_normal, eps_choice)
    out = ad.interp1d(x, lam)
    if degenerate.any():
        # collapsed rows pass through untouched rather than through a rounded grid
        keep = Tensor((~degenerate).astype(np.float64))
        out = out * keep + x * Tensor(degenerate.astype(np.float64))
    return out


def segment_order(keys: np.ndarray, n: int) -> np.ndarray:
    return np.argsort(keys[..., :n], axis=-1, kind="stable")


def permutation_index(length: int, order) -> np.ndarray:
    """Gather index that concatenates segments [floor(i*L/n), floor((i+1)*L/n)) in ``order``."""
    order = np.asarray(order)
    n = order.size
    bounds = [(i * length) // n for i in range(n + 1)]
    return np.concatenate([np.arange(bounds[s], bounds[s + 1]) for s in order])


def permute_fixed(x, n: int, keys) -> Tensor:
    x = ad.as_tensor(x)
    length = x.shape[-1]
    keys = np.asarray(keys)
    orders = segment_order(keys, n)
    index = np.stack([permutation_index(length, o) for o in orders])  # (N, L)
    return ad.take_lastaxis(x, index[:, None, :])


def permute(x, raw_perm, keys, k_max: int) -> Tensor:
    """Segment shuffle whose count comes from ``raw_perm``.

    The count is rounded in the forward pass. Backward uses a straight-through
    estimator: the output is multiplied by n/n with the numerator carrying the
    relaxed count's gradient.
    """
    x = ad.as_tensor(x)
    raw_perm = ad.as_tensor(raw_perm)
    relaxed = 1.0 + (k_max - 1) * ad.logistic(raw_perm)
    n = effective_segments(raw_perm.data, k_max)
    out = permute_fixed(x, n, keys)
    straight = relaxed + Tensor(n - relaxed.data)
    return out * (straight / Tensor(straight.data))


def leaves_forward(x, params: AugmentParams, noise: NoiseBundle, additive_magw: bool = False) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape != noise.shape:
        raise ValueError(f"noise bundle drawn for {noise.shape}, input is {x.shape}")
    out = jitter(x, params.sigma_j(), noise.jitter)
    out = scale(out, params.sigma_s(), noise.scale)
    out = mag_warp(out, params.sigma_m(), noise.magw, additive=additive_magw)
    out = time_distort(out, params, noise.gmm_normal, noise.gmm_choice)
    out = permute(out, params.raw_perm, noise.perm_keys, params.bounds.k_max)
    return out


def fixed_sigma_view(x, sigma: float, noise: NoiseBundle, k_max: int = 5) -> np.ndarray:
    """Non-learned baseline view: jitter, scale, magnitude warp, time warp, permutation.

    All intensities equal ``sigma``; the segment count is drawn uniformly from 1..k_max.
    """
    with _no_tape():
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        out = jitter(x, sigma, noise.jitter)
        out = scale(out, sigma, noise.scale)
        out = mag_warp(out, sigma, noise.magw)
        out = time_warp_baseline(out, sigma, noise.timew)
        counts = 1 + np.minimum((noise.perm_count * k_max).astype(int), k_max - 1)
        rows = []
        for i, n in enumerate(counts):
            idx = permutation_index(out.shape[-1], segment_order(noise.perm_keys[i], int(n)))
            rows.append(out[i][:, idx])
        return np.stack(rows)


# ------------------------------------------------------------- diagnostics


def faithfulness_proxy(x, view) -> dict[str, np.ndarray]:
    """RMSE and Pearson correlation between signal and view, per (sample, channel).

    A constant channel has no defined correlation; it reports 1 when the view
    equals the signal and 0 otherwise.
    """
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    b = view.data if isinstance(view, Tensor) else np.asarray(view, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    rmse = np.sqrt(np.mean((a - b) ** 2, axis=-1))
    da = a - a.mean(axis=-1, keepdims=True)
    db = b - b.mean(axis=-1, keepdims=True)
    denom = np.sqrt((da * da).sum(-1) * (db * db).sum(-1))
    same = np.all(a == b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, (da * db).sum(-1) / np.where(denom > 0, denom, 1.0), np.where(same, 1.0, 0.0))
    return {"rmse": rmse, "pearson": np.clip(corr, -1.0, 1.0)}


def write_view_csv(path, signal: np.ndarray, channel_names=None):
    """One row per channel under a ``channel,t0,t1,...`` header."""
    signal = np.asarray(signal, dtype=np.float64)
    c, length = signal.shape
    names = channel_names or [f"ch{i}" for i in range(c)]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel"] + [f"t{i}" for i in range(length)])
        for name, row in zip(names, signal):
            w.writerow([name] + [repr(float(v)) for v in row])
