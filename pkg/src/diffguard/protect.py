"""Protective perturbations: early-stage loss, baselines and the PGD driver.

All losses take a single image ``x_src`` of shape (H, W, C) and a perturbation
``delta`` of the same shape (ndarray or Tensor) and return a scalar Tensor, so
``tensor.backward`` gives the gradient with respect to ``delta``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .diffusion import DenoiserModel, ddim_step, ddim_timesteps
from .errors import NumericError, UsageError
from .masks import AugmentParams, augment_mask, as_mask, default_zeta
from .seeding import derive_rng, derive_seed
from .tensor import Tensor

LOSS_KINDS = ("early_stage", "recon_max", "targeted_image")
MAXIMIZE = {"early_stage": True, "recon_max": True, "targeted_image": False}
MAX_TRUNCATION = 8


@dataclass(frozen=True)
class AttackConfig:
    loss: str = "early_stage"
    eta: float = 16 / 255
    gamma: float = 1 / 255
    steps: int = 300
    use_mask_augmentation: bool = True
    augment: AugmentParams | None = None  # None: defaults sized to the mask
    noise_resample: bool = True
    target_image: np.ndarray | None = field(default=None, compare=False)  # None: gray 0.5
    K: int = 4
    cond: int = 0
    seed: int = 0
    region: str = "mask"  # "mask" or "whole"
    best_iterate: bool = True

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise UsageError(f"unknown loss {self.loss!r}")
        if not (0 < self.gamma <= self.eta <= 1):
            raise UsageError(f"need 0 < gamma <= eta <= 1, got gamma={self.gamma}, eta={self.eta}")
        if self.steps < 0:
            raise UsageError("steps must be >= 0")
        if self.loss == "targeted_image" and not 1 <= self.K <= MAX_TRUNCATION:
            raise UsageError(f"truncation K must be in [1, {MAX_TRUNCATION}]")
        if self.region not in ("mask", "whole"):
            raise UsageError(f"unknown region {self.region!r}")


@dataclass
class ProtectionResult:
    delta: np.ndarray
    losses: list[float]
    best_losses: list[float]
    best_index: int
    wall_s: float
    config: AttackConfig


# ---------------------------------------------------------------------------
# projection and application


def project_linf(delta, eta: float, x_src=None) -> np.ndarray:
    """Clamp to [-eta, eta]; with ``x_src`` also keep ``x_src + delta`` inside [0, 1]."""
    if eta < 0:
        raise UsageError("eta must be >= 0")
    d = np.clip(np.asarray(delta, np.float32), -eta, eta)
    if x_src is not None:
        x = np.asarray(x_src, np.float32)
        d = np.clip(d, -x, 1.0 - x)
    return d.astype(np.float32)


def region_mask(x_src: np.ndarray, M_tr, region: str) -> np.ndarray:
    """(H, W, 1) float32 indicator of where the perturbation may live."""
    H, W = x_src.shape[:2]
    if region == "whole":
        return np.ones((H, W, 1), np.float32)
    if region == "mask":
        return as_mask(M_tr)[..., None].astype(np.float32)
    raise UsageError(f"unknown region {region!r}")


def apply_protection(x_src, delta, region) -> np.ndarray:
    """x_src + delta restricted to ``region`` (a mask, or the string "whole"), clamped to [0, 1]."""
    x = np.asarray(x_src, np.float32)
    d = np.asarray(delta, np.float32)
    if d.shape != x.shape:
        raise UsageError(f"delta shape {d.shape} != image shape {x.shape}")
    r = 1.0 if isinstance(region, str) and region == "whole" else region_mask(x, region, "mask")
    return np.clip(x + d * r, 0.0, 1.0).astype(np.float32)


def random_noise_delta(x_src, M_tr, eta: float, seed: int, region: str = "mask") -> np.ndarray:
    """Uniform noise in [-eta, eta] inside the region: the null baseline."""
    x = np.asarray(x_src, np.float32)
    d = np.random.default_rng(seed).uniform(-eta, eta, x.shape).astype(np.float32)
    return project_linf(d * region_mask(x, M_tr, region), eta, x)


# ---------------------------------------------------------------------------
# losses


def _prep(model: DenoiserModel, x_src, delta, mask=None):
    x = np.asarray(x_src, np.float32)
    a = model.arch
    if x.shape != (a.image_size, a.image_size, a.channels):
        raise UsageError(f"image shape {x.shape} does not match model {a}")
    delta = T.tensor(delta)
    if delta.shape != x.shape:
        raise UsageError(f"delta shape {delta.shape} != image shape {x.shape}")
    x_adv = T.add(x[None].astype(delta.data.dtype), T.reshape(delta, (1,) + x.shape))
    if mask is None:
        return x_adv, None
    m = as_mask(mask)
    if m.shape != x.shape[:2]:
        raise UsageError(f"mask shape {m.shape} != image extents {x.shape[:2]}")
    return x_adv, m[None, ..., None].astype(delta.data.dtype)


def _masked(x_adv: Tensor, m: np.ndarray) -> Tensor:
    return T.mul(x_adv, np.broadcast_to(m, x_adv.shape).copy())


def _need_inpaint(model: DenoiserModel, what: str) -> None:
    if model.arch.variant != "inpaint":
        raise UsageError(f"{what} needs an inpaint-variant model")


def loss_early_stage(model: DenoiserModel, x_src, delta, mask, cond, x_T) -> Tensor:
    """Squared norm of the noise predicted at t = T for the protected, masked source."""
    _need_inpaint(model, "early-stage loss")
    x_adv, m = _prep(model, x_src, delta, mask)
    x_T = np.asarray(x_T, x_adv.data.dtype).reshape(x_adv.shape)
    eps = model.eps(x_T, model.sched.T, cond, m, _masked(x_adv, m))
    return T.sum_squares(eps)


def loss_recon_max(model: DenoiserModel, x_src, delta, cond, rng: np.random.Generator) -> Tensor:
    """Noise-prediction error at a random timestep (to be maximized).

    Inpaint models are given an all-ones mask and the full protected image.
    """
    x_adv, _ = _prep(model, x_src, delta)
    dt = x_adv.data.dtype
    t = int(rng.integers(1, model.sched.T + 1))
    eps = rng.standard_normal(x_adv.shape).astype(dt)
    a, s = float(model.sched.alpha[t]), float(model.sched.sigma[t])
    x_t = T.add(T.scale(x_adv, a), eps * s)
    if model.arch.variant == "inpaint":
        ones = np.ones(x_adv.shape[:3] + (1,), dt)
        pred = model.eps(x_t, t, cond, ones, x_adv)
    else:
        pred = model.eps(x_t, t, cond)
    return T.sum_squares(T.sub(pred, eps))


def loss_targeted_image(model: DenoiserModel, x_src, delta, mask, cond, target, K: int,
                        seed: int) -> Tensor:
    """Squared distance between a K-step DDIM edit and ``target`` (to be minimized).

    The sampler starts from noise seeded by ``seed`` and is differentiated
    through every step; the final estimate is not clamped.
    """
    _need_inpaint(model, "targeted loss")
    if not 1 <= K <= MAX_TRUNCATION:
        raise UsageError(f"truncation K must be in [1, {MAX_TRUNCATION}], got {K}")
    x_adv, m = _prep(model, x_src, delta, mask)
    dt = x_adv.data.dtype
    x = T.tensor(np.random.default_rng(seed).standard_normal(x_adv.shape).astype(dt))
    msrc = _masked(x_adv, m)
    steps = ddim_timesteps(model.sched.T, K)
    for t, t_next in zip(steps[:-1], steps[1:]):
        x = ddim_step(model, x, t, t_next, cond, m, msrc)
    target = np.broadcast_to(np.asarray(target, dt), x_adv.shape)
    return T.sum_squares(T.sub(x, target))


# ---------------------------------------------------------------------------
# PGD


def _augment_params(M_tr: np.ndarray, cfg: AttackConfig) -> AugmentParams:
    return cfg.augment if cfg.augment is not None else AugmentParams(zeta=default_zeta(M_tr))


def pgd_protect(x_src, M_tr, model: DenoiserModel, config: AttackConfig,
                callback=None) -> ProtectionResult:
    """Sign-gradient PGD on the configured loss.

    Maximization losses ascend, the targeted loss descends.  Each iteration may
    draw a fresh augmented mask and a fresh x_T.  With ``best_iterate`` the
    returned perturbation is the iterate scoring best under one fixed draw
    (``best_losses`` holds those running scores).  ``callback(i, delta)`` sees
    the perturbation after every update.
    """
    t0 = time.perf_counter()
    cfg = config
    x = np.asarray(x_src, np.float32)
    M_tr = as_mask(M_tr)
    if not M_tr.any() and (cfg.loss != "recon_max" or cfg.region == "mask"):
        raise UsageError("protection mask is empty")
    if cfg.loss != "recon_max":
        _need_inpaint(model, f"{cfg.loss} loss")
    region = region_mask(x, M_tr, cfg.region)
    sign = 1.0 if MAXIMIZE[cfg.loss] else -1.0
    target = np.full(x.shape, 0.5, np.float32) if cfg.target_image is None \
        else np.asarray(cfg.target_image, np.float32)
    aug = _augment_params(M_tr, cfg) if cfg.use_mask_augmentation else None
    noise_rng = derive_rng(cfg.seed, "pgd-noise")
    fixed_xT = noise_rng.standard_normal(x.shape).astype(np.float32)

    def loss_at(delta: Tensor, i: int) -> Tensor:
        if aug is not None:
            M = augment_mask(M_tr, replace(aug, seed=derive_seed(cfg.seed, "pgd-aug", i)))
        else:
            M = M_tr
        if cfg.loss == "early_stage":
            x_T = noise_rng.standard_normal(x.shape).astype(np.float32) if cfg.noise_resample \
                else fixed_xT
            return loss_early_stage(model, x, delta, M, cfg.cond, x_T)
        if cfg.loss == "recon_max":
            return loss_recon_max(model, x, delta, cfg.cond, derive_rng(cfg.seed, "pgd-recon", i))
        seed = derive_seed(cfg.seed, "pgd-target", i) if cfg.noise_resample \
            else derive_seed(cfg.seed, "pgd-target")
        return loss_targeted_image(model, x, delta, M, cfg.cond, target, cfg.K, seed)

    # Iterates are ranked under one common draw (fixed noise, training mask): the
    # per-iteration losses use fresh draws whose spread dwarfs the effect of delta.
    stochastic = cfg.noise_resample or aug is not None or cfg.loss == "recon_max"

    def select_score(d: np.ndarray) -> float:
        if cfg.loss == "early_stage":
            return loss_early_stage(model, x, d, M_tr, cfg.cond, fixed_xT).item()
        if cfg.loss == "recon_max":
            return loss_recon_max(model, x, d, cfg.cond, derive_rng(cfg.seed, "pgd-select")).item()
        return loss_targeted_image(model, x, d, M_tr, cfg.cond, target, cfg.K,
                                   derive_seed(cfg.seed, "pgd-target")).item()

    delta = np.zeros_like(x)
    losses: list[float] = []
    best_losses: list[float] = []
    best_delta, best_val, best_i = delta.copy(), -math.inf * sign, 0

    def check(i: int, val: float) -> float:
        if not math.isfinite(val):
            raise NumericError(f"non-finite protection loss at iteration {i}")
        return val

    def consider(i: int, d: np.ndarray, val: float) -> None:
        nonlocal best_delta, best_val, best_i
        if cfg.best_iterate and stochastic:
            val = check(i, select_score(d))
        if sign * val > sign * best_val:
            best_delta, best_val, best_i = d.copy(), val, i
        best_losses.append(best_val)

    for i in range(cfg.steps):
        dt = Tensor(delta, requires_grad=True)
        loss = loss_at(dt, i)
        val = check(i, loss.item())
        losses.append(val)
        consider(i, delta, val)
        (g,) = T.backward(loss, [dt])
        delta = project_linf(delta + sign * cfg.gamma * np.sign(g), cfg.eta, x) * region
        if callback is not None:
            callback(i, delta)
    if cfg.steps > 0:
        val = check(cfg.steps, loss_at(Tensor(delta), cfg.steps).item())
        losses.append(val)
        consider(cfg.steps, delta, val)
    if cfg.best_iterate and cfg.steps > 0:
        out, idx = best_delta, best_i
    else:
        out, idx = delta, cfg.steps
    return ProtectionResult(out.astype(np.float32), losses, best_losses, idx,
                            time.perf_counter() - t0, cfg)


def save_delta(path, delta: np.ndarray) -> None:
    """Signed perturbation as a single-tensor DGCKPT1 file."""
    T.save_tensors(path, {"delta": np.asarray(delta, np.float32)})


def load_delta(path) -> np.ndarray:
    tensors = T.load_tensors(path)
    if set(tensors) != {"delta"}:
        raise UsageError(f"{path} is not a perturbation file")
    return tensors["delta"]
