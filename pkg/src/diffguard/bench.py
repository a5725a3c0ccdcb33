"""Benchmark harness: edits, PSNR, protection methods, sweeps, transfer and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import BenchItem
from .diffusion import DenoiserModel, ddim_sample
from .errors import UsageError
from .masks import UNSEEN_KINDS, as_mask
from .protect import AttackConfig, apply_protection, pgd_protect, random_noise_delta
from .purify import parse_purifier
from .seeding import derive_seed

MASK_IDS = ("seen",) + UNSEEN_KINDS
METHODS = ("unprotected", "random_noise_control", "ours_early_stage", "ours_no_aug",
           "photoguard_targeted", "advdm_recon")
# loss ablation only: the reconstruction loss confined to the mask, so that it differs
# from ours_no_aug in the loss alone
ABLATION_METHODS = ("recon_max_masked",)
CSV_HEADER = ["image_id", "mask_id", "split", "cond_id", "method", "purifier", "target_model",
              "psnr_db", "wall_s", "seed"]
FAIL_FRACTION = 0.05


# ---------------------------------------------------------------------------
# metric and editing


def psnr(a, b) -> float:
    """20 log10(1 / RMSE) for images in [0, 1]; ``inf`` when identical."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise UsageError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def postprocess_paste(src, mask, edited) -> np.ndarray:
    """Keep the source inside the mask, the generated pixels elsewhere."""
    src = np.asarray(src, np.float32)
    edited = np.asarray(edited, np.float32)
    if src.shape != edited.shape:
        raise UsageError(f"paste shape mismatch {src.shape} vs {edited.shape}")
    m = np.asarray(mask, np.float32)
    if m.ndim == src.ndim - 1:
        m = m[..., None]
    return (m * src + (1.0 - m) * edited).astype(np.float32)


def edit(model: DenoiserModel, x_input, mask, cond, n_steps: int, seed) -> np.ndarray:
    """Inpaint everything outside ``mask`` under condition ``cond``, then paste the kept region.

    Accepts one image (H, W, C) or a batch (B, H, W, C) with per-row masks,
    conditions and seeds.
    """
    if model.arch.variant != "inpaint":
        raise UsageError("edit needs an inpaint-variant model")
    x = np.asarray(x_input, np.float32)
    single = x.ndim == 3
    if single:
        x, mask = x[None], np.asarray(mask)[None]
    m = np.stack([as_mask(mm) for mm in mask])[..., None].astype(np.float32)
    if m.shape[:3] != x.shape[:3]:
        raise UsageError(f"mask extents {m.shape[:3]} do not match images {x.shape[:3]}")
    seeds = np.broadcast_to(np.asarray(seed, np.int64), (len(x),))
    out = ddim_sample(model, n_steps, cond, seeds, mask=m, src=x)
    out = postprocess_paste(x, m, out)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 0
    eta: float = 16 / 255
    gamma: float = 1 / 255
    steps: int = 300
    K: int = 4
    edit_steps: int = 50
    methods: tuple[str, ...] = METHODS
    mask_ids: tuple[str, ...] = MASK_IDS
    purifiers: tuple[str | None, ...] = (None,)
    augment_s: float = 5.0
    augment_N: int = 3

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS + ABLATION_METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}")
        bad = [m for m in self.mask_ids if m not in MASK_IDS]
        if bad:
            raise UsageError(f"unknown mask ids {bad}")
        for p in self.purifiers:
            if p is not None:
                parse_purifier(p)


def attack_config(method: str, cfg: BenchConfig, seed: int) -> AttackConfig | None:
    """PGD settings of a method; ``None`` for the non-optimized methods."""
    common = dict(eta=cfg.eta, gamma=cfg.gamma, steps=cfg.steps, seed=seed, K=cfg.K)
    if method == "ours_early_stage":
        return AttackConfig(loss="early_stage", use_mask_augmentation=True, **common)
    if method == "ours_no_aug":
        return AttackConfig(loss="early_stage", use_mask_augmentation=False, **common)
    if method == "photoguard_targeted":
        return AttackConfig(loss="targeted_image", use_mask_augmentation=False, **common)
    if method == "advdm_recon":
        return AttackConfig(loss="recon_max", use_mask_augmentation=False, region="whole", **common)
    if method == "recon_max_masked":
        return AttackConfig(loss="recon_max", use_mask_augmentation=False, region="mask", **common)
    return None


def method_region(method: str) -> str:
    return "whole" if method == "advdm_recon" else "mask"


# ---------------------------------------------------------------------------
# protection phase


@dataclass
class DeltaRecord:
    image_id: int
    method: str
    delta: np.ndarray
    wall_s: float
    seed: int
    losses: list[float] = field(default_factory=list)
    error: str | None = None


def _augment_override(cfg: BenchConfig, item: BenchItem, ac: AttackConfig) -> AttackConfig:
    if not ac.use_mask_augmentation:
        return ac
    from .masks import AugmentParams, default_zeta
    aug = AugmentParams(zeta=default_zeta(item.m_gt), s=cfg.augment_s, N=cfg.augment_N)
    return replace(ac, augment=aug)


def protect_item(model: DenoiserModel, item: BenchItem, method: str, cfg: BenchConfig) -> DeltaRecord:
    seed = derive_seed(cfg.seed, "protect", item.image_id, method)
    t0 = time.perf_counter()
    try:
        if method == "unprotected":
            return DeltaRecord(item.image_id, method, np.zeros_like(item.image), 0.0, seed)
        if method == "random_noise_control":
            d = random_noise_delta(item.image, item.m_gt, cfg.eta, seed)
            return DeltaRecord(item.image_id, method, d, time.perf_counter() - t0, seed)
        ac = _augment_override(cfg, item, attack_config(method, cfg, seed))
        res = pgd_protect(item.image, item.m_gt, model, ac)
        return DeltaRecord(item.image_id, method, res.delta, res.wall_s, seed, res.losses)
    except Exception as exc:  # recorded, the run goes on
        return DeltaRecord(item.image_id, method, np.zeros_like(item.image), time.perf_counter() - t0,
                           seed, error=f"{type(exc).__name__}: {exc}")


_WORKER: dict = {}


def _init_worker(model, items, cfg):
    _WORKER.update(model=model, items={it.image_id: it for it in items}, cfg=cfg)


def _protect_job(key):
    image_id, method = key
    return protect_item(_WORKER["model"], _WORKER["items"][image_id], method, _WORKER["cfg"])


def _run_jobs(fn, keys: list, jobs: int, init_args) -> list:
    if jobs <= 1 or len(keys) <= 1:
        _init_worker(*init_args)
        try:
            return [fn(k) for k in keys]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init_args) as ex:
        return list(ex.map(fn, keys))


def protect_all(model: DenoiserModel, items: Sequence[BenchItem], cfg: BenchConfig,
                jobs: int = 1) -> dict[tuple[int, str], DeltaRecord]:
    """Perturbations for every (item, method); keyed and ordered deterministically."""
    keys = [(it.image_id, m) for it in items for m in cfg.methods]
    recs = _run_jobs(_protect_job, keys, jobs, (model, list(items), cfg))
    return {(r.image_id, r.method): r for r in recs}


# ---------------------------------------------------------------------------
# evaluation phase


@dataclass(frozen=True)
class BenchRecord:
    image_id: int
    mask_id: str
    split: str
    cond_id: int
    method: str
    purifier: str
    target_model: str
    psnr_db: float
    wall_s: float
    seed: int
    error: str | None = None

    @property
    def key(self):
        return (self.image_id, self.mask_id, self.cond_id, self.method, self.purifier,
                self.target_model)


def _edit_seed(cfg: BenchConfig, image_id: int, mask_id: str, cond: int) -> int:
    return derive_seed(cfg.seed, "edit", image_id, mask_id, cond)


def evaluate_item(model: DenoiserModel, item: BenchItem, deltas: dict[str, DeltaRecord],
                  cfg: BenchConfig, target_model: str) -> list[BenchRecord]:
    """PSNR between edits of protected and clean inputs over the item's masks and conditions.

    With a purifier the reference is the edit of the purified clean image, so
    the score measures the protection that survives purification rather than
    the purifier's own distortion.
    """
    tasks = [(mid, c) for mid in cfg.mask_ids for c in item.conds]
    masks = np.stack([item.masks[mid] for mid, _ in tasks])
    conds = np.array([c for _, c in tasks])
    seeds = np.array([_edit_seed(cfg, item.image_id, mid, c) for mid, c in tasks])
    n = len(tasks)

    def run_edit(x):
        return edit(model, np.repeat(x[None], n, 0), masks, conds, cfg.edit_steps, seeds)

    refs = {pur: run_edit(item.image if pur is None else parse_purifier(pur)(item.image))
            for pur in cfg.purifiers}
    out = []
    for method in cfg.methods:
        dr = deltas[(item.image_id, method)]
        protected = apply_protection(item.image, dr.delta,
                                     "whole" if method_region(method) == "whole" else item.m_gt)
        for pur in cfg.purifiers:
            label = pur or "none"
            error = dr.error
            if error is None:
                try:
                    if method == "unprotected":
                        edited = refs[pur]  # identical input and seeds give identical edits
                    else:
                        edited = run_edit(protected if pur is None else parse_purifier(pur)(protected))
                    scores = [psnr(edited[k], refs[pur][k]) for k in range(n)]
                except Exception as exc:
                    error = f"{type(exc).__name__}: {exc}"
            if error is not None:
                scores = [math.nan] * n
            for k, (mid, c) in enumerate(tasks):
                out.append(BenchRecord(item.image_id, mid, "seen" if mid == "seen" else "unseen",
                                       int(c), method, label, target_model, scores[k], dr.wall_s,
                                       int(seeds[k]), error))
    return out


def _eval_job(key):
    image_id, target_model, deltas = key
    return evaluate_item(_WORKER["model"], _WORKER["items"][image_id], deltas, _WORKER["cfg"],
                         target_model)


def evaluate_all(model: DenoiserModel, items: Sequence[BenchItem],
                 deltas: dict[tuple[int, str], DeltaRecord], cfg: BenchConfig,
                 target_model: str = "A", jobs: int = 1) -> list[BenchRecord]:
    keys = [(it.image_id, target_model,
             {(it.image_id, m): deltas[(it.image_id, m)] for m in cfg.methods}) for it in items]
    nested = _run_jobs(_eval_job, keys, jobs, (model, list(items), cfg))
    return sorted((r for rs in nested for r in rs), key=lambda r: r.key)


@dataclass
class BenchResult:
    records: list[BenchRecord]
    summary: dict
    deltas: dict[tuple[int, str], DeltaRecord]
    failed: bool


def run_benchmark(items: Sequence[BenchItem], model: DenoiserModel, cfg: BenchConfig,
                  jobs: int = 1, target_model: str = "A",
                  deltas: dict[tuple[int, str], DeltaRecord] | None = None) -> BenchResult:
    """Protect every item with every method (using the ground-truth mask), then score edits.

    ``deltas`` skips the protection phase (perturbations optimized elsewhere).
    """
    if deltas is None:
        deltas = protect_all(model, items, cfg, jobs)
    records = evaluate_all(model, items, deltas, cfg, target_model, jobs)
    summary = summarize(records)
    return BenchResult(records, summary, deltas, summary["failed"])


def transfer_eval(items: Sequence[BenchItem], deltas: dict[tuple[int, str], DeltaRecord],
                  model_b: DenoiserModel, cfg: BenchConfig, target_model: str = "B",
                  jobs: int = 1) -> BenchResult:
    """Score perturbations optimized on one model against another model."""
    for (iid, m), dr in deltas.items():
        if dr.delta.shape != (model_b.arch.image_size, model_b.arch.image_size, model_b.arch.channels):
            raise UsageError(f"perturbation {iid}/{m} has shape {dr.delta.shape}, "
                             f"incompatible with target model {model_b.arch}")
    return run_benchmark(items, model_b, cfg, jobs, target_model, deltas)


def budget_sweep(items: Sequence[BenchItem], model: DenoiserModel, cfg: BenchConfig,
                 etas: Sequence[float] | None = None, step_budgets: Sequence[int] | None = None,
                 jobs: int = 1) -> tuple[list[BenchRecord], dict]:
    """One benchmark per budget value; records are tagged via the ``purifier`` column
    as ``eta=<v>`` or ``steps=<n>`` and the summary reports monotonicity."""
    if (etas is None) == (step_budgets is None):
        raise UsageError("give exactly one of etas or step_budgets")
    values = list(etas if etas is not None else step_budgets)
    if values != sorted(values):
        raise UsageError("budget list must be sorted")
    records: list[BenchRecord] = []
    per_value = {}
    for v in values:
        sub = replace(cfg, eta=float(v), gamma=min(cfg.gamma, float(v))) if etas is not None \
            else replace(cfg, steps=int(v))
        res = run_benchmark(items, model, sub, jobs)
        tag = f"eta={v:.6g}" if etas is not None else f"steps={v}"
        records += [replace(r, purifier=tag) for r in res.records]
        final_losses = {m: [d.losses[-1] for (i, mm), d in res.deltas.items() if mm == m and d.losses]
                        for m in cfg.methods}
        per_value[tag] = {"summary": res.summary["groups"],
                          "final_loss_median": {m: _median(v2) for m, v2 in final_losses.items()}}
    report = {"values": values, "kind": "eta" if etas is not None else "steps", "per_value": per_value,
              "monotone": monotonicity(records, cfg.methods, values, etas is not None)}
    return sorted(records, key=lambda r: r.key), report


def monotonicity(records: Iterable[BenchRecord], methods, values, is_eta: bool,
                 split: str = "seen") -> dict:
    """Median PSNR per budget value and the inversions against the expected direction."""
    out = {}
    recs = list(records)
    for m in methods:
        meds = []
        for v in values:
            tag = f"eta={v:.6g}" if is_eta else f"steps={v}"
            meds.append(_median([r.psnr_db for r in recs if r.method == m and r.purifier == tag
                                 and r.split == split]))
        inv = [meds[i + 1] - meds[i] for i in range(len(meds) - 1) if meds[i + 1] > meds[i]]
        out[m] = {"medians": meds, "inversions": inv}
    return out


# ---------------------------------------------------------------------------
# aggregation and reporting


def _median(vals) -> float:
    v = [x for x in vals if not math.isnan(x)]
    return float(np.median(v)) if v else math.nan


def _mean(vals) -> float:
    v = [x for x in vals if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


def summarize(records: Sequence[BenchRecord]) -> dict:
    """Median, mean and count per (method, split, purifier, target model)."""
    groups: dict[str, dict] = {}
    for r in records:
        k = f"{r.method}|{r.split}|{r.purifier}|{r.target_model}"
        groups.setdefault(k, []).append(r.psnr_db)
    n_fail = sum(r.error is not None for r in records)
    return {
        "groups": {k: {"median": _median(v), "mean": _mean(v), "count": len(v)}
                   for k, v in sorted(groups.items())},
        "n_records": len(records),
        "n_failed": n_fail,
        "failed": bool(records) and n_fail / len(records) >= FAIL_FRACTION,
    }


def group_median(summary: dict, method: str, split: str, purifier: str = "none",
                 target_model: str = "A") -> float:
    return summary["groups"][f"{method}|{split}|{purifier}|{target_model}"]["median"]


def fmt_float(v: float) -> str:
    """6 significant digits; ``inf`` / ``nan`` literals."""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.6g}"


def records_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: r.key):
        w.writerow([r.image_id, r.mask_id, r.split, r.cond_id, r.method, r.purifier, r.target_model,
                    fmt_float(r.psnr_db), fmt_float(r.wall_s), r.seed])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float):
        return fmt_float(obj) if not math.isfinite(obj) else float(fmt_float(obj))
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_reports(out_dir, name: str, records: Sequence[BenchRecord], summary: dict,
                  include_wall: bool = True) -> tuple[Path, Path]:
    """``<name>.csv`` and ``<name>.json`` under ``out_dir``.

    With ``include_wall=False`` the wall-time column is written as 0 so files
    can be compared byte for byte across runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = records if include_wall else [replace(r, wall_s=0.0) for r in records]
    p_csv, p_json = out / f"{name}.csv", out / f"{name}.json"
    p_csv.write_text(records_csv(recs))
    p_json.write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return p_csv, p_json


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
