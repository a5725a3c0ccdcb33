"""Noise schedules, the denoiser network, training losses and DDIM sampling.

Conventions:
  * pixel values live in [0, 1]; images are ``(B, H, W, C)`` float32;
  * timesteps are integers ``1..T``; index 0 of a schedule is the clean endpoint
    (alpha=1, sigma=0), which is where DDIM ends;
  * a mask value of 1 marks a pixel to KEEP; the complement is regenerated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError, ShapeError, UsageError
from .tensor import AdamState, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    alpha: np.ndarray  # length T+1, alpha[0] = 1
    sigma: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        """log(alpha^2 / sigma^2) for t = 1..T (index 0 is +inf and omitted)."""
        a, s = self.alpha[1:].astype(np.float64), self.sigma[1:].astype(np.float64)
        return np.log(a * a) - np.log(s * s)


COSINE_OFFSET = 0.008
COSINE_TERMINAL_ABAR = 5e-4


def make_schedule(T_steps: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    """Variance-preserving schedule.

    ``cosine`` uses abar(t) = cos^2(theta_t) / cos^2(theta_0) with theta running
    linearly from the offset angle to the angle whose squared cosine is
    ``COSINE_TERMINAL_ABAR``.  ``linear`` is the usual beta ramp 1e-4..0.02
    (rescaled by 1000/T for other horizons, betas capped at 0.999).
    """
    if T_steps < 2:
        raise UsageError(f"schedule needs T >= 2, got {T_steps}")
    t = np.arange(T_steps + 1, dtype=np.float64)
    if kind == "cosine":
        th0 = COSINE_OFFSET / (1 + COSINE_OFFSET) * math.pi / 2
        th1 = math.acos(math.sqrt(COSINE_TERMINAL_ABAR))
        theta = th0 + (th1 - th0) * t / T_steps
        abar = np.cos(theta) ** 2 / math.cos(th0) ** 2
    elif kind == "linear":
        scale = 1000.0 / T_steps
        betas = np.minimum(np.linspace(1e-4 * scale, 0.02 * scale, T_steps), 0.999)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise UsageError(f"unknown schedule kind {kind!r}")
    abar[0] = 1.0
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(T_steps, kind, alpha, sigma)


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise UsageError(f"timestep out of [1, {sched.T}]: {t}")
    return t


def _per_sample(v: np.ndarray, t: np.ndarray, ndim: int, dtype) -> np.ndarray:
    v = v[t].astype(dtype)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def q_sample(x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = alpha_t x + sigma_t eps; ``t`` is a scalar or one step per batch row."""
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise UsageError(f"noise shape {eps.shape} != image shape {x.shape}")
    t = _check_t(t, sched)
    dt = np.result_type(x.dtype, np.float32)
    a = _per_sample(sched.alpha, t, x.ndim, dt)
    s = _per_sample(sched.sigma, t, x.ndim, dt)
    return a * x + s * eps


# ---------------------------------------------------------------------------
# training masks


def _ellipse(H: int, W: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def random_training_mask(H: int, W: int, seed) -> np.ndarray:
    """Union of 1-3 random rectangles/ellipses marking the KEEP region.

    Coverage is kept within [0.05, 0.95]; draws outside that band are redrawn
    from the same stream.
    """
    if H < 8 or W < 8:
        raise UsageError("training masks need H, W >= 8")
    rng = np.random.default_rng(seed)
    while True:
        m = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            h = rng.integers(max(2, H // 8), H * 3 // 4 + 1)
            w = rng.integers(max(2, W // 8), W * 3 // 4 + 1)
            y0 = rng.integers(0, H - h + 1)
            x0 = rng.integers(0, W - w + 1)
            if rng.random() < 0.5:
                m[y0:y0 + h, x0:x0 + w] = True
            else:
                m |= _ellipse(H, W, y0 + (h - 1) / 2, x0 + (w - 1) / 2, h / 2, w / 2)
        cover = m.mean()
        if 0.05 <= cover <= 0.95:
            return m.astype(np.float32)


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class Arch:
    image_size: int = 32
    channels: int = 1
    base_width: int = 32
    vocab: int = 5  # condition ids 0..vocab-1, 0 = unconditional
    variant: str = "standard"  # or "inpaint"
    emb_channels: int = 4
    time_dim: int = 32
    groups: int = 8
    skip: bool = True  # see DenoiserModel

    @property
    def in_channels(self) -> int:
        extra = self.channels + 1 if self.variant == "inpaint" else 0
        return self.channels + extra + self.emb_channels


def _timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None].astype(np.float64) * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


class DenoiserModel:
    """Two-level U-Net predicting the noise of ``x_t``.

    With ``arch.skip`` (the default) the network output ``F`` is combined as
    ``eps_hat = sigma_t * x_t + alpha_t * F`` (``F`` plays the role of ``-v``).
    Near t = T the noise estimate must reproduce x_t almost exactly, including
    its spatial mean, which group normalization strips from the features; the
    skip term carries it, so clean-image estimates there stay well conditioned.
    Without ``skip`` the network output is the noise estimate itself.
    """

    def __init__(self, arch: Arch, params: dict[str, np.ndarray], sched: NoiseSchedule | None = None):
        if arch.variant not in ("standard", "inpaint"):
            raise UsageError(f"unknown variant {arch.variant!r}")
        self.arch = arch
        self.params = params
        self.sched = sched or make_schedule()
        self.opt = AdamState()
        self._check_params()

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, arch: Arch, seed: int, sched: NoiseSchedule | None = None) -> "DenoiserModel":
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out):
            p[name + ".w"] = (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)
            p[name + ".b"] = np.zeros(fan_out, np.float32)

        def conv(name, k, cin, cout, zero=False):
            std = 0.0 if zero else 1.0 / math.sqrt(k * k * cin)
            p[name + ".w"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(np.float32)
            p[name + ".b"] = np.zeros(cout, np.float32)

        def norm(name, c):
            p[name + ".g"] = np.ones(c, np.float32)
            p[name + ".b"] = np.zeros(c, np.float32)

        w, td = arch.base_width, arch.time_dim
        emb = 2 * td
        p["cond_table"] = rng.standard_normal((arch.vocab, td)).astype(np.float32)
        dense("temb1", emb, emb)
        dense("temb2", emb, emb)
        dense("emb_in", emb, arch.emb_channels)
        conv("conv_in", 3, arch.in_channels, w)
        for name, cin, cout in cls._blocks(w):
            norm(name + ".n1", cin)
            conv(name + ".c1", 3, cin, cout)
            dense(name + ".e", emb, cout)
            norm(name + ".n2", cout)
            conv(name + ".c2", 3, cout, cout)
            if cin != cout:
                conv(name + ".sk", 1, cin, cout)
        norm("out.n", w)
        conv("out.c", 3, w, arch.channels, zero=True)
        return cls(arch, p, sched)

    @staticmethod
    def _blocks(w: int) -> list[tuple[str, int, int]]:
        return [("enc1", w, w), ("enc2", w, 2 * w), ("mid", 2 * w, 2 * w),
                ("dec2", 4 * w, 2 * w), ("dec1", 3 * w, w)]

    def _check_params(self) -> None:
        w = self.params.get("conv_in.w")
        if w is None or w.shape[2] != self.arch.in_channels:
            got = None if w is None else w.shape[2]
            raise ShapeError("conv_in", f"input conv expects {self.arch.in_channels} channels, "
                                        f"parameters have {got}")

    def copy(self) -> "DenoiserModel":
        m = DenoiserModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.sched)
        return m

    # -- forward ----------------------------------------------------------

    def eps(self, x_t, t, cond, mask=None, masked_src=None, *, params=None) -> Tensor:
        """Noise prediction for a batch.

        ``x_t``: (B, H, W, C); ``t``: ints (B,) or scalar; ``cond``: ints (B,) or
        scalar.  The inpaint variant also needs ``mask`` (B, H, W, 1) and
        ``masked_src`` (B, H, W, C), the latter already multiplied by the mask.
        ``params`` may map names to Tensors (to differentiate w.r.t. weights).
        """
        a = self.arch
        x_t = T.tensor(x_t)
        if x_t.data.ndim != 4 or x_t.shape[1:] != (a.image_size, a.image_size, a.channels):
            raise ShapeError("eps.input", f"expected (B, {a.image_size}, {a.image_size}, "
                                          f"{a.channels}), got {x_t.shape}")
        B = x_t.shape[0]
        t = _check_t(np.broadcast_to(t, (B,)), self.sched)
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
        if np.any(cond < 0) or np.any(cond >= a.vocab):
            raise UsageError(f"condition id out of [0, {a.vocab}): {cond}")
        P = params if params is not None else self.params

        def g(name):
            return P[name]

        onehot = np.zeros((B, a.vocab), np.float32)
        onehot[np.arange(B), cond] = 1.0
        feats = T.concat_channels([T.tensor(_timestep_features(t, a.time_dim)),
                                   T.matmul(onehot, g("cond_table"))])
        emb = T.add_channel_bias(T.matmul(feats, g("temb1.w")), g("temb1.b"))
        emb = T.add_channel_bias(T.matmul(T.silu(emb), g("temb2.w")), g("temb2.b"))
        emb_act = T.silu(emb)

        S = a.image_size
        emb_map = T.tile_spatial(T.add_channel_bias(T.matmul(emb_act, g("emb_in.w")), g("emb_in.b")), S, S)
        parts = [x_t]
        if a.variant == "inpaint":
            if mask is None or masked_src is None:
                raise UsageError("inpaint model needs mask and masked source")
            parts += [T.tensor(mask), T.tensor(masked_src)]
        elif mask is not None or masked_src is not None:
            raise UsageError("standard model takes no mask conditioning")
        parts.append(emb_map)
        h = T.conv2d(T.concat_channels(parts), g("conv_in.w"), g("conv_in.b"))

        def block(name, x):
            y = T.silu(T.group_norm(x, a.groups, g(name + ".n1.g"), g(name + ".n1.b")))
            y = T.conv2d(y, g(name + ".c1.w"), g(name + ".c1.b"))
            e = T.add_channel_bias(T.matmul(emb_act, g(name + ".e.w")), g(name + ".e.b"))
            y = T.add_channel_bias(y, e)
            y = T.silu(T.group_norm(y, a.groups, g(name + ".n2.g"), g(name + ".n2.b")))
            y = T.conv2d(y, g(name + ".c2.w"), g(name + ".c2.b"))
            if (name + ".sk.w") in P:
                x = T.conv2d(x, g(name + ".sk.w"), g(name + ".sk.b"))
            return T.add(x, y)

        h1 = block("enc1", h)
        h2 = block("enc2", T.downsample2(h1))
        m = block("mid", T.downsample2(h2))
        d2 = block("dec2", T.concat_channels([T.upsample2(m), h2]))
        d1 = block("dec1", T.concat_channels([T.upsample2(d2), h1]))
        out = T.silu(T.group_norm(d1, a.groups, g("out.n.g"), g("out.n.b")))
        F = T.conv2d(out, g("out.c.w"), g("out.c.b"))
        if not a.skip:
            return F
        dt = F.data.dtype
        sig = _per_sample(self.sched.sigma, t, 4, dt)
        alp = _per_sample(self.sched.alpha, t, 4, dt)
        shape = x_t.shape
        return T.add(T.mul(x_t, np.broadcast_to(sig, shape).astype(dt)),
                     T.mul(F, np.broadcast_to(alp, shape).astype(dt)))

    __call__ = eps


def to_inpaint(base: DenoiserModel) -> DenoiserModel:
    """Expand a standard model's input conv with zero weights for (mask, masked source)."""
    if base.arch.variant != "standard":
        raise UsageError("base model must be the standard variant")
    arch = replace(base.arch, variant="inpaint")
    params = {k: v.copy() for k, v in base.params.items()}
    w = params["conv_in.w"]
    C = base.arch.channels
    extra = np.zeros(w.shape[:2] + (C + 1, w.shape[3]), np.float32)
    params["conv_in.w"] = np.concatenate([w[:, :, :C], extra, w[:, :, C:]], axis=2)
    return DenoiserModel(arch, params, base.sched)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainBatch:
    images: np.ndarray  # (B, H, W, C) in [0, 1]
    conds: np.ndarray  # (B,) ints

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.conds) != len(self.images):
            raise UsageError("batch images must be (B, H, W, C) with one condition per image")
        if self.images.min() < 0 or self.images.max() > 1:
            raise UsageError("batch pixels must lie in [0, 1]")


def _train_step(model: DenoiserModel, batch: TrainBatch, rng: np.random.Generator,
                masks: np.ndarray | None) -> float:
    x = batch.images.astype(np.float32)
    B = len(x)
    t = rng.integers(1, model.sched.T + 1, size=B)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    x_t = q_sample(x, t, eps, model.sched).astype(np.float32)
    names = sorted(model.params)
    ptens = {k: Tensor(model.params[k], True) for k in names}
    if masks is None:
        pred = model.eps(x_t, t, batch.conds, params=ptens)
    else:
        pred = model.eps(x_t, t, batch.conds, masks, x * masks, params=ptens)
    loss = T.scale(T.sum_squares(T.sub(pred, eps)), 1.0 / B)
    grads = T.backward(loss, [ptens[k] for k in names])
    T.optimizer_step(model.params, dict(zip(names, grads)), model.opt)
    return loss.item()


def train_step_standard(model: DenoiserModel, batch: TrainBatch, rng: np.random.Generator) -> float:
    """One noise-prediction step; returns the batch-mean squared error before the update."""
    if model.arch.variant != "standard":
        raise UsageError("train_step_standard needs a standard-variant model")
    return _train_step(model, batch, rng, None)


def train_step_inpaint(model: DenoiserModel, batch: TrainBatch, rng: np.random.Generator) -> float:
    """Like the standard step, conditioning on a random KEEP mask and the masked source."""
    if model.arch.variant != "inpaint":
        raise UsageError("train_step_inpaint needs an inpaint-variant model")
    _, H, W, _ = batch.images.shape
    seeds = rng.integers(0, 2**63 - 1, size=len(batch.images))
    masks = np.stack([random_training_mask(H, W, int(s)) for s in seeds])[..., None]
    return _train_step(model, batch, rng, masks)


# ---------------------------------------------------------------------------
# sampling


def ddim_timesteps(T_steps: int, n_steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps from T to 0 (inclusive), n_steps intervals."""
    if not 1 <= n_steps <= T_steps:
        raise UsageError(f"n_steps must be in [1, {T_steps}], got {n_steps}")
    return [int(v) for v in np.round(np.linspace(T_steps, 0, n_steps + 1))]


def initial_noise(seeds, shape: tuple[int, ...]) -> np.ndarray:
    """One standard-normal image per seed."""
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds]) \
        .astype(np.float32)


def _conditioning(model: DenoiserModel, mask, src, B: int):
    if model.arch.variant == "inpaint":
        if mask is None or src is None:
            raise UsageError("inpaint sampling needs mask and source")
        mask = np.broadcast_to(np.asarray(mask, np.float32), (B,) + np.shape(mask)[-3:])
        src = np.broadcast_to(np.asarray(src, np.float32), (B,) + np.shape(src)[-3:])
        return mask, src * mask
    if mask is not None or src is not None:
        raise UsageError("standard model takes no mask conditioning")
    return None, None


def ddim_step(model: DenoiserModel, x_t, t: int, t_next: int, cond, mask=None, masked_src=None):
    """Deterministic DDIM update from ``t`` to ``t_next`` (works on Tensors)."""
    s = model.sched
    eps = model.eps(x_t, t, cond, mask, masked_src)
    x0 = T.scale(T.sub(x_t, T.scale(eps, float(s.sigma[t]))), 1.0 / float(s.alpha[t]))
    if t_next == 0:
        return x0
    return T.add(T.scale(x0, float(s.alpha[t_next])), T.scale(eps, float(s.sigma[t_next])))


def ddim_sample(model: DenoiserModel, n_steps: int, cond, seed, mask=None, src=None,
                x_T: np.ndarray | None = None, clip_x0: bool = True) -> np.ndarray:
    """Deterministic (eta=0) DDIM from seeded noise; output clamped to [0, 1].

    ``seed`` is an int or one int per batch row; ``cond`` likewise.  With
    ``clip_x0`` each step's clean estimate is clamped to [0, 1] and the noise
    is re-derived from it before stepping, which keeps the trajectory inside
    the data range when early predictions are amplified by 1 / alpha_t.
    """
    a = model.arch
    shape = (a.image_size, a.image_size, a.channels)
    if x_T is None:
        x_T = initial_noise(seed, shape)
    B = len(x_T)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
    mask, msrc = _conditioning(model, mask, src, B)
    s = model.sched
    steps = ddim_timesteps(s.T, n_steps)
    x = np.asarray(x_T, np.float32)
    for t, t_next in zip(steps[:-1], steps[1:]):
        eps = model.eps(x, t, cond, mask, msrc).data
        x0 = (x - s.sigma[t] * eps) / s.alpha[t]
        if clip_x0:
            x0 = np.clip(x0, 0.0, 1.0)
            eps = (x - s.alpha[t] * x0) / s.sigma[t]
        x = (x0 if t_next == 0 else s.alpha[t_next] * x0 + s.sigma[t_next] * eps).astype(np.float32)
    return np.clip(x, 0.0, 1.0)


def one_step_x0_estimate(model: DenoiserModel, x_T: np.ndarray, cond, mask=None, src=None) -> np.ndarray:
    """Clean-image estimate from a single prediction at t = T, clamped to [0, 1]."""
    s = model.sched
    if s.alpha[s.T] < 1e-6:
        raise NumericError(f"alpha_T = {s.alpha[s.T]:.3g} too small to invert")
    x_T = np.asarray(x_T, np.float32)
    mask, msrc = _conditioning(model, mask, src, len(x_T))
    eps = model.eps(x_T, s.T, cond, mask, msrc).data
    return np.clip((x_T - s.sigma[s.T] * eps) / s.alpha[s.T], 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: DenoiserModel, path: str | Path) -> None:
    """DGCKPT1 parameters plus a ``.json`` sidecar with the architecture and schedule."""
    path = Path(path)
    T.save_tensors(path, {k: model.params[k] for k in sorted(model.params)})
    meta = {"arch": asdict(model.arch), "schedule": {"T": model.sched.T, "kind": model.sched.kind}}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> DenoiserModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arch = Arch(**meta["arch"])
    sched = make_schedule(meta["schedule"]["T"], meta["schedule"]["kind"])
    return DenoiserModel(arch, T.load_tensors(path), sched)


def fit(model: DenoiserModel, images: np.ndarray, conds: np.ndarray, steps: int,
        batch_size: int, seed: int, callback=None) -> list[float]:
    """Run ``steps`` training steps on minibatches drawn with replacement.

    Uses the inpainting loss for inpaint-variant models.  Returns the loss per step.
    """
    if steps < 0 or batch_size < 1:
        raise UsageError("steps must be >= 0 and batch_size >= 1")
    step = train_step_inpaint if model.arch.variant == "inpaint" else train_step_standard
    rng = np.random.default_rng(seed)
    losses = []
    for i in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        loss = step(model, TrainBatch(images[idx], conds[idx]), rng)
        if not math.isfinite(loss):
            raise NumericError(f"training loss became non-finite at step {i}")
        losses.append(loss)
        if callback is not None:
            callback(i, loss)
    return losses
