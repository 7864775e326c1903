"""Run configuration: one JSON document covering every module's settings.

``init-config`` emits the full default document; loading validates every
section, rejects unknown keys, and maps the loss weights' "auto" marker to
the unresolved (None) state that the training loop fills from class counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig
from .data import SynthConfig
from .errors import ConfigError
from .imbalance import LossConfig
from .nn import ModelConfig
from .stain import StainParams
from .train import NUMERIC_MODES, REFERENCE64, OptimConfig


@dataclass
class RunConfig:
    seed: int = 0
    numeric_mode: str = REFERENCE64
    stain: StainParams = field(default_factory=StainParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.numeric_mode not in NUMERIC_MODES:
            raise ConfigError(f"numeric_mode must be one of {NUMERIC_MODES}")


def _weight_to_json(value: float | None):
    return "auto" if value is None else value


def _weight_from_json(value, key: str) -> float | None:
    if value == "auto" or value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"loss.{key} must be a number or 'auto', got {value!r}")


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "numeric_mode": cfg.numeric_mode,
        "stain": {
            "i0": cfg.stain.i0,
            "beta": cfg.stain.beta,
            "alpha_percentile": cfg.stain.alpha_percentile,
            "conc_percentile": cfg.stain.conc_percentile,
            "target_matrix": np.asarray(cfg.stain.target_matrix).tolist(),
            "target_max_conc": np.asarray(cfg.stain.target_max_conc).tolist(),
        },
        "augment": {
            "crop_fraction": cfg.augment.crop_fraction,
            "out_size": cfg.augment.out_size,
            "p_dihedral": cfg.augment.p_dihedral,
            "brightness_range": list(cfg.augment.brightness_range),
            "contrast_range": list(cfg.augment.contrast_range),
            "mean": list(cfg.augment.mean),
            "std": list(cfg.augment.std),
            "normalize_train": cfg.augment.normalize_train,
            "normalize_eval": cfg.augment.normalize_eval,
        },
        "loss": {
            "w1": _weight_to_json(cfg.loss.w1),
            "w0": _weight_to_json(cfg.loss.w0),
            "alpha": cfg.loss.alpha,
            "gamma": cfg.loss.gamma,
            "lambda": cfg.loss.lambda_,
        },
        "model": {
            "in_channels": cfg.model.in_channels,
            "stem_channels": cfg.model.stem_channels,
            "blocks": [list(b) for b in cfg.model.blocks],
            "transition_compression": cfg.model.transition_compression,
            "input_size": cfg.model.input_size,
        },
        "optim": {
            "head_lr": cfg.optim.head_lr,
            "backbone_lr_ratio": cfg.optim.backbone_lr_ratio,
            "beta1": cfg.optim.beta1,
            "beta2": cfg.optim.beta2,
            "epsilon": cfg.optim.epsilon,
            "weight_decay": cfg.optim.weight_decay,
            "batch_size": cfg.optim.batch_size,
            "max_epochs": cfg.optim.max_epochs,
            "patience": cfg.optim.patience,
            "val_fraction": cfg.optim.val_fraction,
            "balanced_sampling": cfg.optim.balanced_sampling,
        },
        "data": {
            "n_samples": cfg.data.n_samples,
            "pos_fraction": cfg.data.pos_fraction,
            "n_domains": cfg.data.n_domains,
            "patch_size": cfg.data.patch_size,
            "seed": cfg.data.seed,
            "separation": cfg.data.separation,
        },
    }


def _check_keys(section: str, given: dict, allowed: tuple[str, ...]) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys(
        "config",
        doc,
        ("seed", "numeric_mode", "stain", "augment", "loss", "model", "optim", "data"),
    )
    defaults = config_to_dict(RunConfig())

    def section(name: str) -> dict:
        value = doc.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be an object")
        _check_keys(name, value, tuple(defaults[name].keys()))
        merged = dict(defaults[name])
        merged.update(value)
        return merged

    try:
        stain_d = section("stain")
        stain = StainParams(
            i0=stain_d["i0"],
            beta=stain_d["beta"],
            alpha_percentile=stain_d["alpha_percentile"],
            conc_percentile=stain_d["conc_percentile"],
            target_matrix=np.asarray(stain_d["target_matrix"], dtype=np.float64),
            target_max_conc=np.asarray(stain_d["target_max_conc"], dtype=np.float64),
        )
        augment_d = section("augment")
        augment = AugmentConfig(
            crop_fraction=augment_d["crop_fraction"],
            out_size=augment_d["out_size"],
            p_dihedral=augment_d["p_dihedral"],
            brightness_range=tuple(augment_d["brightness_range"]),
            contrast_range=tuple(augment_d["contrast_range"]),
            mean=tuple(augment_d["mean"]),
            std=tuple(augment_d["std"]),
            normalize_train=bool(augment_d["normalize_train"]),
            normalize_eval=bool(augment_d["normalize_eval"]),
        )
        loss_d = section("loss")
        loss = LossConfig(
            w1=_weight_from_json(loss_d["w1"], "w1"),
            w0=_weight_from_json(loss_d["w0"], "w0"),
            alpha=loss_d["alpha"],
            gamma=loss_d["gamma"],
            lambda_=loss_d["lambda"],
        )
        model_d = section("model")
        model = ModelConfig(
            in_channels=model_d["in_channels"],
            stem_channels=model_d["stem_channels"],
            blocks=tuple(tuple(b) for b in model_d["blocks"]),
            transition_compression=model_d["transition_compression"],
            input_size=model_d["input_size"],
        )
        optim_d = section("optim")
        optim = OptimConfig(**optim_d)
        data_d = section("data")
        data = SynthConfig(**data_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    seed = doc.get("seed", defaults["seed"])
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(
        seed=seed,
        numeric_mode=doc.get("numeric_mode", defaults["numeric_mode"]),
        stain=stain,
        augment=augment,
        loss=loss,
        model=model,
        optim=optim,
        data=data,
    )


def render_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
