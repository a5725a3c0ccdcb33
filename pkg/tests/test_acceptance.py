"""Acceptance criteria 1-13, each reported as one PASS/FAIL line.

Criteria 1-5 run directly on small random models.  Criteria 6-13 read the
CSVs of two full desk-scale studies (``diffguard.study``) run with the same
master seed; the medians here are recomputed from the raw rows rather than
taken from the JSON summaries.  The two studies take a few hours on one core.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from diffguard import tensor as T
from diffguard.diffusion import make_schedule, q_sample
from diffguard.masks import AugmentParams, augment_mask, rasterize, trace_contours
from diffguard.protect import AttackConfig, pgd_protect
from diffguard.selfcheck import loss_fn, random_blob, random_model
from diffguard.study import run_study

ETAS = (4, 6, 8, 12, 16)
PROTECTIVE = ("random_noise_control", "ours_early_stage", "ours_no_aug", "photoguard_targeted",
              "advdm_recon")


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# reading study outputs


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def median_psnr(table: list[dict], **where) -> float:
    vals = [float(r["psnr_db"]) for r in table if all(r[k] == v for k, v in where.items())]
    assert vals, f"no rows for {where}"
    return statistics.median(vals)


def fmt(v: float) -> str:
    return f"{v:.2f}"


def check_fig3(d: Path):
    t = rows(d / "fig3.csv")
    wins = sum(float(r["mse_inpaint"]) < float(r["mse_standard"]) for r in t)
    frac = wins / len(t)
    return len(t) == 64 and frac >= 0.8, f"inpaint one-step MSE lower on {wins}/{len(t)} items ({frac:.2f})"


def check_ordering(d: Path):
    t = rows(d / "bench.csv")
    med = {m: median_psnr(t, method=m, split="seen", purifier="none")
           for m in ("ours_early_stage", "photoguard_targeted", "random_noise_control", "unprotected")}
    chain = [med["ours_early_stage"], med["photoguard_targeted"], med["random_noise_control"]]
    ok = all(b - a >= 0.5 for a, b in zip(chain, chain[1:])) and math.isinf(med["unprotected"]) \
        and chain[-1] < math.inf
    return ok, "seen medians ours+aug {} < photoguard {} < random {} < unprotected {}".format(
        *(fmt(v) for v in chain), med["unprotected"])


def check_mask_robustness(d: Path):
    t = rows(d / "bench.csv")
    gap = {m: median_psnr(t, method=m, split="unseen", purifier="none")
           - median_psnr(t, method=m, split="seen", purifier="none")
           for m in ("ours_early_stage", "ours_no_aug")}
    ok = gap["ours_no_aug"] - gap["ours_early_stage"] >= 0.3
    return ok, f"unseen-seen gap: ours+aug {fmt(gap['ours_early_stage'])} dB, " \
               f"ours_no_aug {fmt(gap['ours_no_aug'])} dB"


def check_loss_ablation(d: Path):
    t = rows(d / "loss_ablation.csv")
    # fixed seen mask, equal steps, every perturbation confined to the mask
    med = {m: median_psnr(t, method=m, split="seen")
           for m in ("ours_no_aug", "recon_max_masked", "photoguard_targeted")}
    ok = med["ours_no_aug"] < min(med["recon_max_masked"], med["photoguard_targeted"])
    return ok, f"seen medians early-stage {fmt(med['ours_no_aug'])}, recon_max " \
               f"{fmt(med['recon_max_masked'])}, targeted {fmt(med['photoguard_targeted'])}"


def check_budget(d: Path):
    t = rows(d / "eta_sweep.csv")
    meds = [median_psnr(t, method="ours_early_stage", purifier=f"eta={e / 255:.6g}") for e in ETAS]
    rises = [b - a for a, b in zip(meds, meds[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.2)
    return ok, "medians over eta " + ", ".join(fmt(v) for v in meds)


def check_purification(d: Path):
    t = rows(d / "purify.csv")
    med = {(m, p): median_psnr(t, method=m, purifier=p)
           for m in PROTECTIVE for p in ("none", "dct_q65", "dct_q90")}
    ok_a = med["ours_early_stage", "dct_q65"] < med["random_noise_control", "dct_q65"]
    # erosion is the PSNR regained relative to the unpurified median
    erosion = {m: (med[m, "dct_q65"] - med[m, "none"], med[m, "dct_q90"] - med[m, "none"])
               for m in PROTECTIVE}
    ok_b = all(q65 > q90 for q65, q90 in erosion.values())
    detail = f"q65 ours {fmt(med['ours_early_stage', 'dct_q65'])} vs random " \
             f"{fmt(med['random_noise_control', 'dct_q65'])}; erosion q65/q90 " + \
             ", ".join(f"{m} {fmt(a)}/{fmt(b)}" for m, (a, b) in erosion.items())
    return ok_a and ok_b, detail


def check_transfer(d: Path):
    t = rows(d / "transfer.csv")
    assert {r["target_model"] for r in t} == {"B"}
    ours = median_psnr(t, method="ours_early_stage")
    rnd = median_psnr(t, method="random_noise_control")
    return rnd - ours >= 0.3, f"on model B ours {fmt(ours)} vs random {fmt(rnd)} dB"


CSV_NAMES = ("fig3.csv", "bench.csv", "loss_ablation.csv", "eta_sweep.csv", "purify.csv",
             "transfer.csv", "train_A_standard.csv", "train_A_inpaint.csv", "train_B_standard.csv",
             "train_B_inpaint.csv")


def check_determinism(d1: Path, d2: Path):
    differ = [n for n in CSV_NAMES if (d1 / n).read_bytes() != (d2 / n).read_bytes()]
    return not differ, f"{len(CSV_NAMES) - len(differ)}/{len(CSV_NAMES)} CSVs byte-identical" + \
        (f"; differing: {differ}" if differ else "")


# ---------------------------------------------------------------------------
# fixtures


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    d = tmp_path_factory.mktemp("study") / "run1"
    meta = run_study(d, seed=0)
    return d, meta


@pytest.fixture(scope="session")
def study_repeat(tmp_path_factory, study):
    d = tmp_path_factory.mktemp("study") / "run2"
    run_study(d, seed=0)
    return d


# ---------------------------------------------------------------------------
# criteria 1-5


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in ("early_stage", "recon_max", "targeted_image")}
    for seed in range(20):
        for kind in worst:
            model = random_model(1000 + seed)
            rng = np.random.default_rng([seed, len(kind)])
            x = rng.uniform(0.1, 0.9, (16, 16, 1)).astype(np.float32)
            mask = random_blob(rng, 16)
            d0 = rng.uniform(-8 / 255, 8 / 255, x.shape).astype(np.float32)
            f = loss_fn(kind, model, x, mask, seed, K=4)
            dt = T.Tensor(d0, requires_grad=True)
            (g,) = T.backward(f(dt), [dt])
            inside = np.argwhere(mask > 0)
            picks = [(*inside[i], 0) for i in rng.choice(len(inside), 3, replace=False)]
            picks += [tuple(p) for p in rng.integers(0, [16, 16, 1], (3, 3))]
            h = 1e-3
            for p in picks:
                e = np.zeros(x.shape)
                e[p] = h
                base = d0.astype(np.float64)
                fd = (f(base + e).item() - f(base - e).item()) / (2 * h)
                err = abs(g[p] - fd) / max(abs(fd), abs(g[p]), 1e-4)
                worst[kind] = max(worst[kind], err)
    wall = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-2 and wall < 120
    report(capsys, 1, ok, "max rel err " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
           + f" in {wall:.0f}s")


def test_criterion_2_forward_statistics(capsys):
    rng = np.random.default_rng(2)
    n, x0 = 10_000, 0.3
    parts, ok = [], True
    for kind in ("cosine", "linear"):
        s = make_schedule(1000, kind)
        for t in (1, 500, 1000):
            xt = q_sample(np.full(n, x0), t, rng.standard_normal(n), s)
            a, sig = s.alpha[t], s.sigma[t]
            z_mean = abs(xt.mean() - a * x0) / (sig / math.sqrt(n))
            z_std = abs(xt.std(ddof=1) - sig) / (sig / math.sqrt(2 * (n - 1)))
            ok &= z_mean < 3 and z_std < 3
            parts.append(f"{kind} t={t} z=({z_mean:.1f},{z_std:.1f})")
    report(capsys, 2, bool(ok), "; ".join(parts))


def test_criterion_3_schedule_invariants(capsys):
    ok, parts = True, []
    for kind in ("cosine", "linear"):
        s = make_schedule(1000, kind)
        with np.errstate(divide="ignore"):  # sigma_0 = 0, so lambda_0 = +inf
            lam = np.log(s.alpha ** 2 / s.sigma ** 2)
        dec = bool(np.all(np.diff(lam) < 0))
        aT2 = float(s.alpha[-1] ** 2)
        vp = float(np.abs(s.alpha ** 2 + s.sigma ** 2 - 1).max())
        ok &= dec and aT2 < 1e-3 and vp <= 1e-6
        parts.append(f"{kind}: lambda decreasing {dec}, alpha_T^2 {aT2:.1e}, vp err {vp:.1e}")
    report(capsys, 3, bool(ok), "; ".join(parts))


def test_criterion_4_augment_invariants(capsys):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    bad = []
    for i in range(500):
        m = random_blob(rng)
        p = AugmentParams(zeta=float(rng.uniform(0, 5)), s=float(rng.uniform(0.5, 8)),
                          N=int(rng.integers(1, 5)), seed=int(rng.integers(2**31)))
        a = augment_mask(m, p)
        ok = set(np.unique(a)) <= {0, 1} and not (a & (1 - m)).any() \
            and np.array_equal(a, augment_mask(m, p))
        ref = np.zeros_like(m)
        for c in trace_contours(m):
            ref |= rasterize(c, *m.shape)
        z = augment_mask(m, AugmentParams(zeta=0.0, s=p.s, N=p.N, seed=p.seed))
        if not (ok and np.array_equal(z, ref & m)):
            bad.append(i)
    wall = time.perf_counter() - t0
    report(capsys, 4, not bad and wall < 60, f"{500 - len(bad)}/500 masks pass in {wall:.0f}s")


def test_criterion_5_pgd_invariants(capsys):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    kinds = [("early_stage", "mask", True), ("early_stage", "mask", False),
             ("targeted_image", "mask", False), ("recon_max", "whole", False),
             ("recon_max", "mask", False)]
    broken = []
    for j in range(50):
        loss, region, aug = kinds[j % len(kinds)]
        model = random_model(int(rng.integers(2**31)))
        x = rng.uniform(0, 1, (16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        eta = float(rng.choice([4, 8, 16])) / 255
        cfg = AttackConfig(loss=loss, eta=eta, gamma=eta / 4, steps=4, region=region,
                           use_mask_augmentation=aug, seed=j)
        allowed = np.ones_like(m) if region == "whole" else m

        def cb(i, d):
            # the perturbed image may be clipped, so the bound is on delta itself
            if np.abs(d).max() > eta + 1e-7 or d[..., 0][allowed == 0].any():
                broken.append((j, i))

        res = pgd_protect(x, m, model, cfg, callback=cb)
        b = np.asarray(res.best_losses)
        step = np.diff(b) if loss != "targeted_image" else -np.diff(b)
        if (step < 0).any() or np.abs(res.delta).max() > eta + 1e-7:
            broken.append((j, "best"))
    wall = time.perf_counter() - t0
    report(capsys, 5, not broken and wall < 300, f"50 jobs, violations {broken[:5]}, {wall:.0f}s")


# ---------------------------------------------------------------------------
# criteria 6-13 (full study)


def test_criterion_6_first_step_keep_region(capsys, study):
    d, meta = study
    ok, detail = check_fig3(d)
    wall = meta["wall_s"]["train_A"] + meta["wall_s"]["fig3"]
    report(capsys, 6, ok and wall < 1200, f"{detail}, {wall:.0f}s including training")


def test_criterion_7_protection_ordering(capsys, study):
    d, meta = study
    ok, detail = check_ordering(d)
    wall = meta["wall_s"]["bench"]
    report(capsys, 7, ok and wall < 3600 and not meta["failed"]["bench"], f"{detail}, {wall:.0f}s")


def test_criterion_8_mask_robustness(capsys, study):
    report(capsys, 8, *check_mask_robustness(study[0]))


def test_criterion_9_loss_ablation(capsys, study):
    report(capsys, 9, *check_loss_ablation(study[0]))


def test_criterion_10_budget_monotone(capsys, study):
    report(capsys, 10, *check_budget(study[0]))


def test_criterion_11_purification(capsys, study):
    report(capsys, 11, *check_purification(study[0]))


def test_criterion_12_transfer(capsys, study):
    report(capsys, 12, *check_transfer(study[0]))


def test_criterion_13_determinism(capsys, study, study_repeat):
    report(capsys, 13, *check_determinism(study[0], study_repeat))
