"""End-to-end desk-scale study: train two model pairs, then every benchmark.

``python3 -m diffguard.study --out DIR --seed N`` writes, under ``DIR``:

* ``train_<model>_<variant>.csv``  training loss curves
* ``fig3.csv``                     one-step keep-region MSE, standard vs inpaint
* ``bench.csv`` / ``bench.json``   main benchmark on model A, all masks
* ``loss_ablation.*``              three losses on the fixed seen mask, all inside the mask
* ``eta_sweep.*``                  noise-budget sweep, seen masks
* ``purify.*``                     DCT purification at two qualities, seen masks
* ``transfer.*``                   model-A perturbations scored on model B, seen masks
* ``study.json``                   settings and wall times

Every CSV has its wall-time column zeroed, so two runs with the same seed
can be compared byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import bench as B
from .dataset import generate_dataset, training_images
from .diffusion import (Arch, DenoiserModel, fit, initial_noise, make_schedule,
                        one_step_x0_estimate, save_model, to_inpaint)
from .seeding import derive_seed

log = logging.getLogger("diffguard.study")


@dataclass(frozen=True)
class StudyConfig:
    seed: int = 0
    base_width: int = 16
    train_steps: int = 3000
    finetune_steps: int = 3000
    batch_size: int = 8
    n_train_images: int = 4096
    p_uncond: float = 0.1
    lr: float = 1e-3
    n_fig3_items: int = 64
    n_bench_images: int = 16
    attack_steps: int = 300
    edit_steps: int = 50
    etas: tuple[float, ...] = (4 / 255, 6 / 255, 8 / 255, 12 / 255, 16 / 255)
    purifiers: tuple[str, ...] = ("dct_q65", "dct_q90")


def _write_curve(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, B.fmt_float(float(v))])


def train_pair(cfg: StudyConfig, label: str, out: Path) -> tuple[DenoiserModel, DenoiserModel]:
    """A standard model and its inpainting fine-tune, seeded independently per ``label``."""
    imgs, conds = training_images(cfg.n_train_images, derive_seed(cfg.seed, "study-data", label),
                                  32, cfg.p_uncond)
    arch = Arch(base_width=cfg.base_width)
    std = DenoiserModel.init(arch, derive_seed(cfg.seed, "study-init", label), make_schedule(1000))
    std.opt.lr = cfg.lr
    _write_curve(out / f"train_{label}_standard.csv",
                 fit(std, imgs, conds, cfg.train_steps, cfg.batch_size,
                     derive_seed(cfg.seed, "study-fit", label, "standard")))
    inp = to_inpaint(std)
    inp.opt.lr = cfg.lr
    _write_curve(out / f"train_{label}_inpaint.csv",
                 fit(inp, imgs, conds, cfg.finetune_steps, cfg.batch_size,
                     derive_seed(cfg.seed, "study-fit", label, "inpaint")))
    save_model(std, out / f"model_{label}_standard.ckpt")
    save_model(inp, out / f"model_{label}_inpaint.ckpt")
    return std, inp


def fig3_rows(std: DenoiserModel, inp: DenoiserModel, cfg: StudyConfig) -> list[tuple[int, float, float]]:
    """Keep-region MSE of the one-step estimate from the same x_T, per test item."""
    items = generate_dataset(cfg.n_fig3_items, derive_seed(cfg.seed, "fig3-data"))
    x = np.stack([it.image for it in items])
    M = np.stack([it.m_gt for it in items])[..., None].astype(np.float32)
    xT = initial_noise([derive_seed(cfg.seed, "fig3-noise", it.image_id) for it in items], x.shape[1:])
    a = one_step_x0_estimate(std, xT, 0)
    b = one_step_x0_estimate(inp, xT, 0, M, x)
    area = M.sum(axis=(1, 2, 3))
    ea = ((a - x) ** 2 * M).sum(axis=(1, 2, 3)) / area
    eb = ((b - x) ** 2 * M).sum(axis=(1, 2, 3)) / area
    return [(it.image_id, float(u), float(v)) for it, u, v in zip(items, ea, eb)]


def run_study(out_dir, seed: int = 0, jobs: int = 1, config: StudyConfig | None = None) -> dict:
    cfg = replace(config or StudyConfig(), seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    walls: dict[str, float] = {}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        walls[name] = round(time.perf_counter() - t0, 1)
        log.info("%s done in %.1fs", name, walls[name])
        return res

    std_a, inp_a = timed("train_A", train_pair, cfg, "A", out)
    rows = timed("fig3", fig3_rows, std_a, inp_a, cfg)
    with open(out / "fig3.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "mse_standard", "mse_inpaint"])
        for iid, u, v in rows:
            w.writerow([iid, B.fmt_float(u), B.fmt_float(v)])

    items = generate_dataset(cfg.n_bench_images, derive_seed(cfg.seed, "bench-data"))
    bc = B.BenchConfig(seed=derive_seed(cfg.seed, "bench"), steps=cfg.attack_steps,
                       edit_steps=cfg.edit_steps)
    main = timed("bench", B.run_benchmark, items, inp_a, bc, jobs)
    B.write_reports(out, "bench", main.records, main.summary, include_wall=False)

    seen = replace(bc, mask_ids=("seen",))
    # only the loss differs: reuse the fixed-mask perturbations and add masked recon_max
    trio = ("ours_no_aug", "photoguard_targeted", "recon_max_masked")
    extra = timed("ablation_protect", B.protect_all, inp_a, items,
                  replace(seen, methods=("recon_max_masked",)), jobs)
    reuse = {k: v for k, v in main.deltas.items() if k[1] in trio}
    abl = timed("loss_ablation", B.run_benchmark, items, inp_a, replace(seen, methods=trio), jobs,
                "A", {**reuse, **extra})
    B.write_reports(out, "loss_ablation", abl.records, abl.summary, include_wall=False)

    recs, report = timed("eta_sweep", B.budget_sweep, items, inp_a,
                         replace(seen, methods=("ours_early_stage",)), etas=list(cfg.etas), jobs=jobs)
    B.write_reports(out, "eta_sweep", recs, report, include_wall=False)

    pur = timed("purify", B.run_benchmark, items, inp_a,
                replace(seen, purifiers=(None,) + tuple(cfg.purifiers)), jobs, "A", main.deltas)
    B.write_reports(out, "purify", pur.records, pur.summary, include_wall=False)

    _, inp_b = timed("train_B", train_pair, cfg, "B", out)
    tr = timed("transfer", B.transfer_eval, items, main.deltas, inp_b, seen, "B", jobs)
    B.write_reports(out, "transfer", tr.records, tr.summary, include_wall=False)

    meta = {"config": asdict(cfg), "wall_s": walls,
            "failed": {"bench": main.failed, "loss_ablation": abl.failed, "purify": pur.failed, "transfer": tr.failed}}
    (out / "study.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    p = argparse.ArgumentParser(prog="python3 -m diffguard.study", description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/study")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    run_study(args.out, args.seed, args.jobs)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
