"""Fast invariant suites run by ``diffguard selfcheck``.

Each suite returns ``(ok, detail)``; they use small models so the whole
command finishes in well under a minute.
"""
from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import Arch, DenoiserModel, make_schedule, q_sample
from .masks import AugmentParams, augment_mask, rasterize, trace_contours
from .protect import (AttackConfig, loss_early_stage, loss_recon_max, loss_targeted_image,
                      pgd_protect)
from .purify import crop_resize_purify, dct_quantize_purify
from .seeding import derive_rng, derive_seed


def random_model(seed: int, variant: str = "inpaint", width: int = 8, size: int = 16) -> DenoiserModel:
    """Randomly initialised model whose output layer is not zero (so gradients are informative)."""
    m = DenoiserModel.init(Arch(image_size=size, base_width=width, variant=variant, groups=4),
                           seed, make_schedule(1000))
    rng = np.random.default_rng(seed + 1)
    m.params["out.c.w"] = (rng.standard_normal(m.params["out.c.w"].shape) * 0.1).astype(np.float32)
    for k in list(m.params):
        if variant == "inpaint" and k == "conv_in.w":
            m.params[k] = (rng.standard_normal(m.params[k].shape) * 0.3).astype(np.float32)
    return m


def random_blob(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """A union of one or two random ellipses, each at least 3x3."""
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
        ry, rx = rng.uniform(2.5, size * 0.3, 2)
        m |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    return m.astype(np.uint8)


def loss_fn(kind: str, model: DenoiserModel, x, mask, seed: int, K: int = 4):
    """The attack loss ``kind`` as a function of ``delta`` alone (noise fixed by ``seed``)."""
    shape = x.shape
    xT = np.random.default_rng(seed).standard_normal(shape)

    def f(delta):
        if kind == "early_stage":
            return loss_early_stage(model, x, delta, mask, 0, xT)
        if kind == "recon_max":
            return loss_recon_max(model, x, delta, 0, np.random.default_rng(seed))
        return loss_targeted_image(model, x, delta, mask, 0, 0.5, K, seed)

    return f


def gradient_check(kind: str, model: DenoiserModel, seed: int, n_coords: int = 12,
                   h: float = 1e-3, floor: float = 1e-4) -> float:
    """Largest per-coordinate relative error between analytic and central-difference gradients.

    The analytic gradient is the float32 production path; the oracle evaluates
    the same loss in float64 on a random subset of coordinates (half inside the
    mask) plus one random direction.
    """
    rng = derive_rng(seed, "gradcheck", kind)
    S, C = model.arch.image_size, model.arch.channels
    x = rng.uniform(0.1, 0.9, (S, S, C)).astype(np.float32)
    mask = random_blob(rng, S)
    delta0 = rng.uniform(-8 / 255, 8 / 255, x.shape).astype(np.float32)
    f = loss_fn(kind, model, x, mask, int(rng.integers(2**31)))
    d = T.Tensor(delta0, requires_grad=True)
    (g,) = T.backward(f(d), [d])
    inside = np.argwhere(mask[..., None].repeat(C, 2) > 0)
    anywhere = np.argwhere(np.ones(x.shape, bool))
    picks = [tuple(inside[i]) for i in rng.choice(len(inside), n_coords // 2, replace=False)]
    picks += [tuple(anywhere[i]) for i in rng.choice(len(anywhere), n_coords - len(picks), replace=False)]
    fd = T.finite_diff_grad(lambda delta: f(delta), {"delta": delta0}, "delta", h=h, indices=picks)
    errs = [abs(g[p] - fd[p]) / max(abs(fd[p]), abs(g[p]), floor) for p in picks]
    # directional derivative along a random unit direction
    u = rng.standard_normal(x.shape)
    u /= np.linalg.norm(u)
    fp = f(delta0.astype(np.float64) + h * u).item()
    fm = f(delta0.astype(np.float64) - h * u).item()
    dd_fd, dd_an = (fp - fm) / (2 * h), float(np.sum(g * u))
    errs.append(abs(dd_an - dd_fd) / max(abs(dd_fd), abs(dd_an), floor))
    return float(max(errs))


# ---------------------------------------------------------------------------
# suites


def suite_gradients(seed: int):
    worst = {}
    for kind in ("early_stage", "recon_max", "targeted_image"):
        model = random_model(derive_seed(seed, "gc-model", kind))
        worst[kind] = gradient_check(kind, model, seed, n_coords=6)
    return all(v < 1e-2 for v in worst.values()), {k: round(v, 6) for k, v in worst.items()}


def suite_schedule(seed: int):
    detail = {}
    ok = True
    for kind in ("cosine", "linear"):
        s = make_schedule(1000, kind)
        lam_dec = bool(np.all(np.diff(s.lam) < 0))
        aT = float(s.alpha[-1] ** 2)
        vp = float(np.abs(s.alpha ** 2 + s.sigma ** 2 - 1).max())
        ok &= lam_dec and aT < 1e-3 and vp < 1e-6
        detail[kind] = {"lambda_decreasing": lam_dec, "alpha_T_sq": aT, "vp_err": vp}
    return ok, detail


def suite_q_sample(seed: int):
    rng = derive_rng(seed, "qsample")
    s = make_schedule(1000)
    x = np.full((10000,), 0.3)
    ok = True
    for t in (1, 500, 1000):
        xt = q_sample(x, t, rng.standard_normal(x.shape), s)
        se = s.sigma[t] / np.sqrt(len(x))
        ok &= abs(xt.mean() - s.alpha[t] * 0.3) < 3 * se + 1e-12
    return bool(ok), "mean within 3 standard errors"


def suite_augment(seed: int):
    rng = derive_rng(seed, "augment")
    for i in range(50):
        m = random_blob(rng)
        p = AugmentParams(zeta=float(rng.uniform(0, 4)), s=float(rng.uniform(1, 6)),
                          N=int(rng.integers(1, 4)), seed=i)
        a = augment_mask(m, p)
        if (a & (1 - m)).any() or not np.array_equal(a, augment_mask(m, p)):
            return False, f"blob {i} violates containment or determinism"
        z = augment_mask(m, AugmentParams(zeta=0, s=p.s, N=p.N, seed=i))
        ref = np.zeros_like(m)
        for c in trace_contours(m):
            ref |= rasterize(c, *m.shape)
        if not np.array_equal(z, ref & m):
            return False, f"blob {i}: zeta=0 differs from rasterized contour"
    return True, "50 blobs"


def suite_pgd(seed: int):
    model = random_model(derive_seed(seed, "pgd-model"))
    rng = derive_rng(seed, "pgd")
    for j in range(3):
        x = rng.uniform(0, 1, (16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        cfg = AttackConfig(eta=8 / 255, gamma=2 / 255, steps=5, seed=j)
        bad = []

        def cb(i, d):
            if np.abs(d).max() > cfg.eta + 1e-7 or np.any(d[..., 0][m == 0] != 0):
                bad.append(i)

        res = pgd_protect(x, m, model, cfg, callback=cb)
        if bad or np.any(np.diff(res.best_losses) < 0):
            return False, f"job {j}: invariant broken at iterations {bad}"
    return True, "3 jobs"


def suite_purify(seed: int):
    c = np.full((32, 32, 1), 0.42, np.float32)
    ok = np.abs(dct_quantize_purify(c, 50) - c).max() <= 1 / 255 + 1e-6
    ok &= np.abs(crop_resize_purify(c, 0.9) - c).max() < 1e-6
    return bool(ok), "constant images preserved"


def suite_checkpoint(seed: int):
    rng = derive_rng(seed, "ckpt")
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(2, np.float32)}
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "t.ckpt"
        T.save_tensors(p, tensors)
        back = T.load_tensors(p)
    ok = all(np.array_equal(tensors[k], back[k]) for k in tensors) and list(back) == list(tensors)
    return ok, "bit-exact round trip"


SUITES = {"gradients": suite_gradients, "schedule": suite_schedule, "q_sample": suite_q_sample,
          "augment": suite_augment, "pgd": suite_pgd, "purify": suite_purify,
          "checkpoint": suite_checkpoint}


def run_all(seed: int = 0) -> dict:
    out = {}
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out[name] = {"ok": bool(ok), "detail": detail, "seconds": round(time.perf_counter() - t0, 3)}
    return out
