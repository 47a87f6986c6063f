"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the pytest terminal summary, and directly when this
file is run as a script (``python tests/test_acceptance.py``).
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from leaves import gradsuite
from leaves.augment import (
    AugmentBounds,
    AugmentParams,
    NoiseBundle,
    _no_tape,
    distortion_locations,
    leaves_forward,
    permute_fixed,
)
from leaves.autodiff import Tensor
from leaves.contrastive import nt_xent_loss
from leaves.data import SyntheticSpec, gen_synthetic, normalize, split
from leaves.encoder import Encoder, EncoderConfig
from leaves.trainer import (
    GRID_HEADER,
    OptimizerState,
    TrainConfig,
    adversarial_step,
    baseline_grid,
    finetune,
    leaves_loss,
    pretrain_adversarial,
    save_augment,
    save_encoder,
    supervised_baseline,
    table_cell,
    write_grid_csv,
)

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402
from oracles import brute_force_nt_xent  # noqa: E402

PROBE_LR = 1e-5


def report(number: int, title: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -------------------------------------------------------------------- 1


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seeds=range(20))
    elapsed = time.perf_counter() - t0
    summary = gradsuite.summarize(results)
    worst = summary["worst"]
    ok = not summary["failed"] and elapsed < 120
    detail = (f"{len(results)} checks, {len(gradsuite.CHECKS)} operations x 20 seeds, worst {worst.name} "
              f"{worst.error:.2e} (tol {worst.tolerance:g}), failed {summary['failed']}, {elapsed:.1f}s")
    report(1, "gradient suite", ok, detail)


# -------------------------------------------------------------------- 2


def test_criterion_2_nt_xent_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = (2, 4, 8)[trial % 3]
        d = (4, 16)[trial % 2]
        z = rng.normal(size=(2 * n, d))
        worst = max(worst, abs(nt_xent_loss(z, 0.05).item() - brute_force_nt_xent(z, 0.05)))
    single = nt_xent_loss(rng.normal(size=(2, 8))).item()
    identical = nt_xent_loss(np.tile(rng.normal(size=(1, 8)), (4, 1))).item()
    ok = worst < 1e-12 and single == 0.0 and identical == math.log(3)
    report(2, "NT-Xent oracle", ok, f"max |diff| {worst:.1e} over 100 batches; N=1 loss {single!r}; "
           f"identical N=2 loss {identical!r} vs log 3 {math.log(3)!r}")


# -------------------------------------------------------------------- 3


def _random_params(rng, bounds) -> AugmentParams:
    p = AugmentParams.init(bounds)
    for t in (p.raw_sigma_j, p.raw_sigma_s, p.raw_sigma_m, p.raw_perm):
        t.data = rng.uniform(-8, 8)
    p.gmm_weights_raw.data = rng.normal(0, 2, bounds.m)
    p.gmm_means_raw.data = rng.normal(0, 1, bounds.m)
    p.gmm_scales_raw.data = rng.normal(np.log(0.1), 1, bounds.m)
    return p


def test_criterion_3_augmentation_invariants():
    trials = 10_000
    rng = np.random.default_rng(3)
    bounds = AugmentBounds()
    t0 = time.perf_counter()
    counts = dict(shape=0, identity=0, bound=0, monotone=0, multiset=0)
    worst_identity = 0.0
    with _no_tape():
        # shape preservation and identity at zero intensity: 1000 random shapes x 10 samples each
        identity = AugmentParams.identity(bounds)
        for call in range(trials // 10):
            shape = (10, int(rng.integers(1, 4)), int(rng.integers(8, 65)))
            x = rng.normal(size=shape)
            nb = NoiseBundle.draw(call, shape, bounds)
            view = leaves_forward(x, _random_params(rng, bounds), nb).data
            counts["shape"] += 10 * (view.shape == shape)
            dev = np.max(np.abs(leaves_forward(x, identity, nb).data - x), axis=(1, 2))
            worst_identity = max(worst_identity, float(dev.max()))
            counts["identity"] += int(np.sum(dev < 1e-9))
        # effective intensities never exceed eta, including extreme raw values
        for _ in range(trials):
            p = AugmentParams.init(bounds)
            for t in (p.raw_sigma_j, p.raw_sigma_s, p.raw_sigma_m):
                t.data = rng.choice([rng.uniform(-50, 50), rng.uniform(-1e6, 1e6), np.inf])
            eff = p.effective()
            counts["bound"] += all(0 <= eff[k] <= bounds.eta for k in ("sigma_j", "sigma_s", "sigma_m"))
        # distortion locations: non-decreasing with endpoints exactly -1 and +1
        for call in range(trials // 10):
            p = _random_params(rng, bounds)
            shape = (10, 1, int(rng.integers(2, 65)))
            nb = NoiseBundle.draw(10_000 + call, shape, bounds)
            lam = distortion_locations(p, nb.gmm_normal, nb.gmm_choice)[0].data[:, 0]
            good = (np.all(np.diff(lam, axis=-1) >= 0, axis=-1)) & (lam[:, 0] == -1.0) & (lam[:, -1] == 1.0)
            counts["monotone"] += int(good.sum())
        # permutation conserves the multiset of values
        for call in range(trials // 10):
            length = int(rng.integers(5, 65))
            x = rng.normal(size=(10, 2, length))
            n = int(rng.integers(1, 6))
            out = permute_fixed(x, n, rng.random((10, 5))).data
            same = np.all(np.sort(out, axis=-1) == np.sort(x, axis=-1), axis=(1, 2))
            counts["multiset"] += int(same.sum())
    elapsed = time.perf_counter() - t0
    ok = all(v == trials for v in counts.values()) and worst_identity < 1e-9 and elapsed < 60
    detail = ", ".join(f"{k} {v}/{trials}" for k, v in counts.items())
    report(3, "augmentation invariants", ok, f"{detail}; max identity deviation {worst_identity:.1e}; {elapsed:.1f}s")


# -------------------------------------------------------------------- 4


def test_criterion_4_adversarial_dynamics():
    ds, _ = normalize(gen_synthetic(SyntheticSpec(samples_per_class=20, length=128, seed=4)))
    worst_ascent, worst_descent = math.inf, -math.inf
    violations = 0
    for k in range(50):
        rng = np.random.default_rng(k)
        x = Tensor(ds.signals[rng.choice(len(ds), 8, replace=False)])
        encoder = Encoder(EncoderConfig(), seed=k)
        params = AugmentParams.init(AugmentBounds())
        for t in params.tensors():
            t.data = t.data + rng.normal(0, 0.5, t.shape)
        noises = tuple(NoiseBundle.draw(2 * k + v, x.shape, params.bounds) for v in (0, 1))

        def loss():
            with _no_tape():
                return leaves_loss(encoder, params, x, noises, 0.05)[0].item()

        l0 = loss()
        adversarial_step(encoder, params, x, noises, 0.05, None, OptimizerState.for_params(params.tensors()),
                         PROBE_LR, PROBE_LR)
        l1 = loss()
        enc_params = encoder.encoder_tensors() + encoder.projection_tensors()
        adversarial_step(encoder, params, x, noises, 0.05, OptimizerState.for_params(enc_params), None,
                         PROBE_LR, PROBE_LR)
        l2 = loss()
        worst_ascent = min(worst_ascent, l1 - l0)
        worst_descent = max(worst_descent, l2 - l1)
        violations += (l1 < l0 - 1e-9) + (l2 > l1 + 1e-9)
    ok = violations == 0
    report(4, "adversarial dynamics", ok, f"50 probes at step {PROBE_LR:g}; smallest LEAVES change {worst_ascent:+.2e}, "
           f"largest encoder change {worst_descent:+.2e}, violations {violations}")


# ---------------------------------------------------------------- 5 & 8


def desk_data():
    ds = gen_synthetic(SyntheticSpec())
    train, test = split(ds, (2 / 3, 1 / 3), seed=0)
    train, stats = normalize(train)
    test, _ = normalize(test, stats=stats)
    return train, test


def desk_run(out: Path):
    """Pretrain + fine-tune at desk scale, writing every artifact into ``out``."""
    train, test = desk_data()
    config = TrainConfig()
    encoder, params, runlog = pretrain_adversarial(train, config)
    out.mkdir(parents=True, exist_ok=True)
    save_encoder(out / "encoder.ckpt", encoder)
    save_augment(out / "augment.ckpt", params)
    runlog.write_jsonl(out / "runlog.jsonl")
    runlog.write_trajectories(out / "trajectories.csv")
    encoder, metrics = finetune(encoder, train, test, config)
    save_encoder(out / "finetuned.ckpt", encoder)
    return metrics


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "run_a"
    t0 = time.perf_counter()
    leaves_metrics = desk_run(out)
    train, test = desk_data()
    _, supervised_metrics = supervised_baseline(train, test, TrainConfig())
    return out, leaves_metrics, supervised_metrics, time.perf_counter() - t0


def test_criterion_5_desk_learning(desk):
    _, lv, sup, elapsed = desk
    chance = 1 / 3
    ok = (lv["accuracy"] >= sup["accuracy"] and min(lv["accuracy"], sup["accuracy"]) >= chance + 0.20
          and elapsed < 600 and (lv["n_labelled"], lv["n_test"]) == (30, 150))
    report(5, "desk-scale learning", ok,
           f"LEAVES {table_cell(lv['accuracy'], lv['macro_f1'])}, supervised {table_cell(sup['accuracy'], sup['macro_f1'])} "
           f"(acc/F1, {lv['n_labelled']} labels, {lv['n_test']} test), chance 33.3; {elapsed:.0f}s")


def test_criterion_8_reproducibility(desk, tmp_path):
    first = desk[0]
    desk_run(tmp_path / "run_b")
    names = ("runlog.jsonl", "trajectories.csv", "encoder.ckpt", "augment.ckpt", "finetuned.ckpt")
    differing = [n for n in names if (first / n).read_bytes() != (tmp_path / "run_b" / n).read_bytes()]
    report(8, "reproducibility", not differing,
           f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical across two runs; differing {differing}")


# -------------------------------------------------------------------- 6


def test_criterion_6_fixed_sigma_grid(tmp_path):
    train, test = desk_data()
    t0 = time.perf_counter()
    rows = baseline_grid(train, test, TrainConfig())
    write_grid_csv(tmp_path / "grid.csv", rows)
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    accuracies = [r["accuracy"] for r in rows]
    ok = lines[0] == GRID_HEADER and len(lines) == 6 and len(set(accuracies)) > 1
    cells = " | ".join(f"{r['sigma']:g}: {table_cell(r['accuracy'], r['macro_f1'])}" for r in rows)
    report(6, "fixed-sigma grid", ok, f"{cells}; {time.perf_counter() - t0:.0f}s")


# -------------------------------------------------------------------- 7


def test_criterion_7_parameter_count():
    params = AugmentParams.init(AugmentBounds(m=6))
    scalars = sum(t.data.size for t in params.tensors())
    ok = params.count() == scalars == 22 == 4 + 3 * 6
    report(7, "parameter count", ok, f"count() {params.count()}, tensor scalars {scalars}, 4 + 3*6 = 22")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
