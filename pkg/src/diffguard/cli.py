"""Command-line entry point: ``diffguard <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 benchmark finished with too many failed jobs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as B
from .config import echo_config, load_config
from .dataset import generate_dataset, training_images
from .diffusion import Arch, DenoiserModel, fit, load_model, make_schedule, save_model, to_inpaint
from .errors import NumericError, UsageError
from .imageio import read_image, read_mask, write_image, write_mask
from .masks import AugmentParams, augment_mask, default_zeta
from .protect import AttackConfig, apply_protection, load_delta, pgd_protect, save_delta
from .purify import parse_purifier
from .seeding import derive_seed

log = logging.getLogger("diffguard")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _loss_csv(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, B.fmt_float(float(v))])


def _need(value, what: str):
    if value is None:
        raise UsageError(f"missing {what}")
    return value


def _arch(cfg: dict, variant: str = "standard") -> Arch:
    return Arch(variant=variant, **cfg["model"])


def _train_data(cfg: dict, seed: int):
    t = cfg["train"]
    return training_images(t["n_train_images"], derive_seed(seed, "train-data"),
                           cfg["model"]["image_size"], t["p_uncond"])


def _check_image_size(cfg: dict) -> None:
    if cfg["model"]["image_size"] != 32 or cfg["model"]["channels"] != 1:
        raise UsageError("the synthetic dataset generator produces 32x32 grayscale images")


def cmd_train(cfg: dict, args, out: Path) -> int:
    _check_image_size(cfg)
    imgs, conds = _train_data(cfg, args.seed)
    sched = make_schedule(cfg["schedule"]["T"], cfg["schedule"]["kind"])
    model = DenoiserModel.init(_arch(cfg), derive_seed(args.seed, "init", "standard"), sched)
    model.opt.lr = cfg["train"]["lr"]
    losses = fit(model, imgs, conds, cfg["train"]["steps"], cfg["train"]["batch_size"],
                 derive_seed(args.seed, "fit", "standard"))
    save_model(model, out / "model.ckpt")
    _loss_csv(out / "loss_curve.csv", losses)
    log.info("trained %d steps; wrote %s", len(losses), out / "model.ckpt")
    return EXIT_OK


def cmd_finetune(cfg: dict, args, out: Path) -> int:
    _check_image_size(cfg)
    base = load_model(_need(args.base or cfg["io"]["base_checkpoint"], "--base checkpoint"))
    model = to_inpaint(base)
    model.opt.lr = cfg["train"]["lr"]
    imgs, conds = _train_data(cfg, args.seed)
    losses = fit(model, imgs, conds, cfg["train"]["finetune_steps"], cfg["train"]["batch_size"],
                 derive_seed(args.seed, "fit", "inpaint"))
    save_model(model, out / "model.ckpt")
    _loss_csv(out / "loss_curve.csv", losses)
    return EXIT_OK


def _image_and_mask(cfg: dict, args):
    img = read_image(_need(args.image or cfg["io"]["image"], "--image"))
    mask = read_mask(_need(args.mask or cfg["io"]["mask"], "--mask"))
    if mask.shape != img.shape[:2]:
        raise UsageError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    return img, mask


def _attack_config(cfg: dict, seed: int, mask) -> AttackConfig:
    a, g = cfg["attack"], cfg["augment"]
    aug = AugmentParams(zeta=g["zeta"] if g["zeta"] is not None else default_zeta(mask),
                        s=g["s"], N=g["N"])
    return AttackConfig(loss=a["loss"], eta=a["eta"], gamma=a["gamma"], steps=a["steps"],
                        use_mask_augmentation=a["use_mask_augmentation"], augment=aug,
                        noise_resample=a["noise_resample"], K=a["K"], cond=a["cond"],
                        seed=derive_seed(seed, "protect"), region=a["region"],
                        best_iterate=a["best_iterate"])


def cmd_protect(cfg: dict, args, out: Path) -> int:
    img, mask = _image_and_mask(cfg, args)
    model = load_model(_need(args.checkpoint or cfg["io"]["checkpoint"], "--checkpoint"))
    ac = _attack_config(cfg, args.seed, mask)
    res = pgd_protect(img, mask, model, ac)
    save_delta(out / "delta.dgt", res.delta)
    region = "whole" if ac.region == "whole" else mask
    write_image(out / "protected.pgm", apply_protection(img, res.delta, region))
    _loss_csv(out / "loss_trace.csv", res.losses)
    (out / "protect.json").write_text(json.dumps(
        {"linf": float(np.abs(res.delta).max()), "best_index": res.best_index,
         "wall_s": res.wall_s}, indent=2) + "\n")
    return EXIT_OK


def cmd_edit(cfg: dict, args, out: Path) -> int:
    img, mask = _image_and_mask(cfg, args)
    model = load_model(_need(args.checkpoint or cfg["io"]["checkpoint"], "--checkpoint"))
    delta_path = args.delta or cfg["io"]["delta"]
    if delta_path:
        img = apply_protection(img, load_delta(delta_path), mask)
    cond = args.cond if args.cond is not None else cfg["io"]["cond"]
    edited = B.edit(model, img, mask, cond, cfg["bench"]["edit_steps"], derive_seed(args.seed, "edit"))
    write_image(out / "edited.pgm", edited)
    return EXIT_OK


def cmd_purify(cfg: dict, args, out: Path) -> int:
    img = read_image(_need(args.image or cfg["io"]["image"], "--image"))
    pur = parse_purifier(args.purifier or cfg["io"]["purifier"])
    write_image(out / "purified.pgm", pur(img))
    return EXIT_OK


def cmd_augment_mask(cfg: dict, args, out: Path) -> int:
    mask = read_mask(_need(args.mask or cfg["io"]["mask"], "--mask"))
    g = cfg["augment"]
    params = AugmentParams(zeta=g["zeta"] if g["zeta"] is not None else default_zeta(mask),
                           s=g["s"], N=g["N"], seed=derive_seed(args.seed, "augment"))
    write_mask(out / "augmented.pgm", augment_mask(mask, params))
    return EXIT_OK


def bench_config(cfg: dict, seed: int) -> B.BenchConfig:
    b, a, g = cfg["bench"], cfg["attack"], cfg["augment"]
    return B.BenchConfig(seed=seed, eta=a["eta"], gamma=a["gamma"], steps=a["steps"], K=a["K"],
                         edit_steps=b["edit_steps"], methods=tuple(b["methods"]),
                         mask_ids=tuple(b["mask_ids"]),
                         purifiers=(None,) + tuple(b["purifiers"]), augment_s=g["s"],
                         augment_N=g["N"])


def cmd_bench(cfg: dict, args, out: Path) -> int:
    model = load_model(_need(args.checkpoint or cfg["io"]["checkpoint"], "--checkpoint"))
    bc = bench_config(cfg, args.seed)
    items = generate_dataset(cfg["bench"]["n_images"], derive_seed(args.seed, "bench-data"))
    res = B.run_benchmark(items, model, bc, jobs=args.jobs)
    B.write_reports(out, "bench", res.records, res.summary)
    failed = res.failed
    model_b = args.model_b or cfg["io"]["model_b"]
    if model_b:
        tr = B.transfer_eval(items, res.deltas, load_model(model_b), bc, "B", args.jobs)
        B.write_reports(out, "transfer", tr.records, tr.summary)
        failed |= tr.failed
    for key, name in (("etas", "eta_sweep"), ("step_budgets", "steps_sweep")):
        values = cfg["bench"][key]
        if values:
            kw = {"etas": values} if key == "etas" else {"step_budgets": values}
            recs, report = B.budget_sweep(items, model, replace(bc, purifiers=(None,)), jobs=args.jobs,
                                          **kw)
            B.write_reports(out, name, recs, report)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_selfcheck(cfg: dict, args, out: Path) -> int:
    from .selfcheck import run_all
    results = run_all(args.seed)
    (out / "selfcheck.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    for name, r in results.items():
        print(f"{'PASS' if r['ok'] else 'FAIL'} {name}: {r['detail']}")
    return EXIT_OK if all(r["ok"] for r in results.values()) else 1


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "protect": cmd_protect, "edit": cmd_edit,
            "purify": cmd_purify, "augment-mask": cmd_augment_mask, "bench": cmd_bench,
            "selfcheck": cmd_selfcheck}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int, default=0, help="master seed")
        s.add_argument("--out", default=f"runs/{name}", help="output directory")
        s.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name in ("protect", "edit", "bench"):
            s.add_argument("--checkpoint", help="inpaint model checkpoint")
        if name in ("protect", "edit", "purify"):
            s.add_argument("--image")
        if name in ("protect", "edit", "augment-mask"):
            s.add_argument("--mask")
        if name == "finetune":
            s.add_argument("--base", help="standard model checkpoint")
        if name == "edit":
            s.add_argument("--delta", help="perturbation file to apply before editing")
            s.add_argument("--cond", type=int)
        if name == "purify":
            s.add_argument("--purifier", help="dct_q<quality> or crop_f<fraction>")
        if name == "bench":
            s.add_argument("--model-b", help="independently trained model for transfer")
        if name in ("train", "finetune"):
            s.add_argument("--steps", type=int, help="override train.steps / train.finetune_steps")
        if name in ("protect", "bench"):
            s.add_argument("--eta", type=float, help="override attack.eta (pixel units)")
            s.add_argument("--attack-steps", type=int, help="override attack.steps")
        if name == "augment-mask":
            s.add_argument("--zeta", type=float)
    return p


def _flag_overrides(args) -> dict:
    o: dict = {}
    steps = getattr(args, "steps", None)
    if steps is not None:
        key = "finetune_steps" if args.command == "finetune" else "steps"
        o.setdefault("train", {})[key] = steps
    if getattr(args, "eta", None) is not None:
        o.setdefault("attack", {})["eta"] = args.eta
    if getattr(args, "attack_steps", None) is not None:
        o.setdefault("attack", {})["steps"] = args.attack_steps
    if getattr(args, "zeta", None) is not None:
        o.setdefault("augment", {})["zeta"] = args.zeta
    return o


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, _flag_overrides(args))
        out = Path(args.out)
        echo_config(cfg, out, args.seed)
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        # unreadable or missing input files are the caller's mistake
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
