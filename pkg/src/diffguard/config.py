"""Run configuration: JSON sections with defaults, schema validation and flag overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import UsageError

DEFAULTS: dict = {
    "model": {"image_size": 32, "channels": 1, "base_width": 32, "vocab": 5, "emb_channels": 4,
              "time_dim": 32, "groups": 8, "skip": True},
    "schedule": {"T": 1000, "kind": "cosine"},
    "train": {"steps": 3000, "finetune_steps": 3000, "batch_size": 8, "n_train_images": 4096,
              "p_uncond": 0.1, "lr": 1e-3},
    "attack": {"loss": "early_stage", "eta": 16 / 255, "gamma": 1 / 255, "steps": 300,
               "use_mask_augmentation": True, "noise_resample": True, "K": 4, "cond": 0,
               "region": "mask", "best_iterate": True},
    "augment": {"zeta": None, "s": 5.0, "N": 3},
    "bench": {"n_images": 16, "edit_steps": 50,
              "methods": ["unprotected", "random_noise_control", "ours_early_stage", "ours_no_aug",
                          "photoguard_targeted", "advdm_recon"],
              "mask_ids": ["seen", "rect", "circle", "brush", "dilated"],
              "purifiers": [], "etas": [], "step_budgets": []},
    "io": {"checkpoint": None, "base_checkpoint": None, "model_b": None, "image": None,
           "mask": None, "delta": None, "cond": 1, "purifier": "dct_q75"},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}
_path = {"type": ["string", "null"]}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA: dict = _obj({
    "model": _obj({"image_size": {"type": "integer", "minimum": 8, "multipleOf": 4},
                   "channels": {"enum": [1, 3]}, "base_width": {"type": "integer", "minimum": 8,
                                                                "multipleOf": 8},
                   "vocab": {"type": "integer", "minimum": 2}, "emb_channels": {"type": "integer",
                                                                                "minimum": 1},
                   "time_dim": {"type": "integer", "minimum": 2, "multipleOf": 2},
                   "groups": {"type": "integer", "minimum": 1}, "skip": _bool}),
    "schedule": _obj({"T": {"type": "integer", "minimum": 2}, "kind": {"enum": ["cosine", "linear"]}}),
    "train": _obj({"steps": {"type": "integer", "minimum": 0},
                   "finetune_steps": {"type": "integer", "minimum": 0},
                   "batch_size": {"type": "integer", "minimum": 1},
                   "n_train_images": {"type": "integer", "minimum": 1},
                   "p_uncond": {"type": "number", "minimum": 0, "maximum": 1},
                   "lr": {"type": "number", "exclusiveMinimum": 0}}),
    "attack": _obj({"loss": {"enum": ["early_stage", "recon_max", "targeted_image"]},
                    "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "steps": {"type": "integer", "minimum": 0}, "use_mask_augmentation": _bool,
                    "noise_resample": _bool, "K": {"type": "integer", "minimum": 1, "maximum": 8},
                    "cond": {"type": "integer", "minimum": 0}, "region": {"enum": ["mask", "whole"]},
                    "best_iterate": _bool}),
    "augment": _obj({"zeta": {"type": ["number", "null"], "minimum": 0},
                     "s": {"type": "number", "exclusiveMinimum": 0},
                     "N": {"type": "integer", "minimum": 1}}),
    "bench": _obj({"n_images": {"type": "integer", "minimum": 1},
                   "edit_steps": {"type": "integer", "minimum": 1},
                   "methods": {"type": "array", "items": {"type": "string"}},
                   "mask_ids": {"type": "array", "items": {"type": "string"}},
                   "purifiers": {"type": "array", "items": {"type": "string"}},
                   "etas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                   "step_budgets": {"type": "array", "items": {"type": "integer", "minimum": 0}}}),
    "io": _obj({"checkpoint": _path, "base_checkpoint": _path, "model_b": _path, "image": _path,
                "mask": _path, "delta": _path, "cond": {"type": "integer", "minimum": 0},
                "purifier": {"type": "string"}}),
})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then ``overrides`` (e.g. from flags); validated."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config root must be an object")
    validate(doc)
    eff = _merge(DEFAULTS, doc)
    if overrides:
        validate(overrides)
        eff = _merge(eff, overrides)
    validate(eff)
    return eff


def echo_config(cfg: dict, out_dir, seed: int) -> Path:
    """Write the effective configuration (plus seed) to ``out_dir/config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "config.json"
    p.write_text(json.dumps({"seed": seed, **cfg}, indent=2, sort_keys=True) + "\n")
    return p
