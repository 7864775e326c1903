"""AdamW training loop with per-group learning rates and early stopping.

The optimizer applies decoupled weight decay: the decay term is added to
the parameter update outside the adaptive-gradient path. The backbone
group runs at ``head_lr * backbone_lr_ratio`` (default one tenth of the
head). Early stopping tracks validation balanced accuracy with strict
improvement and a patience counter; the loop always returns the parameters
from the best-validation epoch.

Checkpoints are a directory with ``header.json`` (format version, run
config, parameter names/shapes in canonical order, numeric mode, epoch,
best balanced accuracy, seed, optimizer step counter) plus ``params.bin``,
a little-endian blob of the parameter values in the declared order
(float64 in reference mode, float32 in fast mode).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, eval_transform, train_transform
from .errors import CorruptCheckpoint, EmptyInput, MissingClass, ShapeMismatch
from .imbalance import (
    ClassCounts,
    LossConfig,
    combined_grad,
    combined_loss,
    resolve_class_weights,
    sampler_draw,
    sigmoid_stable,
    stratified_split,
)
from .metrics import DomainReport, ScoredSample, domain_report
from .nn import ModelConfig, ParamGroups, backward, forward, init_model, param_groups, param_order
from .stain import StainParams, normalize_or_passthrough

REFERENCE64 = "reference64"
FAST32 = "fast32"
NUMERIC_MODES = (REFERENCE64, FAST32)

CHECKPOINT_FORMAT_VERSION = 1
HEADER_FILE = "header.json"
BLOB_FILE = "params.bin"

# sub-stream tags for deriving independent seeded generators
_STREAM_SPLIT = 0
_STREAM_INIT = 1
_STREAM_SAMPLER = 2
_STREAM_TRANSFORM = 3


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), *key)))


@dataclass
class OptimConfig:
    head_lr: float = 1e-3
    backbone_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 50
    val_fraction: float = 0.2
    balanced_sampling: bool = True

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.head_lr <= 0 or self.backbone_lr_ratio <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adamw_state(params: dict[str, np.ndarray]) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: OptimConfig,
    groups: ParamGroups,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    with the group learning rate (head, or head * backbone_lr_ratio).
    """
    head = set(groups.head)
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name}")
        lr = cfg.head_lr if name in head else cfg.head_lr * cfg.backbone_lr_ratio
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        # decay is decoupled and uses the pre-update parameter value
        theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon) + (
            lr * cfg.weight_decay
        ) * theta
    return params, state


@dataclass
class EarlyStopState:
    best_bacc: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0


def early_stop_update(
    state: EarlyStopState, epoch: int, val_bacc: float | None, patience: int
) -> tuple[EarlyStopState, bool]:
    """Strict-improvement early stopping; undefined bacc never improves."""
    improved = val_bacc is not None and val_bacc > state.best_bacc
    if improved:
        state.best_bacc = float(val_bacc)
        state.best_epoch = epoch
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve = epoch - state.best_epoch
    return state, state.epochs_since_improve >= patience


def _forward_scores(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    tensors: list[np.ndarray],
    micro_batch: int = 64,
) -> np.ndarray:
    scores = np.empty(len(tensors), dtype=np.float64)
    for start in range(0, len(tensors), micro_batch):
        chunk = np.stack(tensors[start : start + micro_batch])
        if chunk.dtype != params["head.bias"].dtype:
            chunk = chunk.astype(params["head.bias"].dtype)
        logits, _ = forward(params, model_cfg, chunk)
        scores[start : start + chunk.shape[0]] = sigmoid_stable(
            np.asarray(logits, dtype=np.float64)
        )
    return scores


def evaluate(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    samples: list[tuple[np.ndarray, int, int]],
    aug_cfg: AugmentConfig,
    stain_params: StainParams | None = None,
    threshold: float = 0.5,
) -> DomainReport:
    """Evaluation-path scores plus a per-domain report.

    ``samples`` holds (patch, label, domain_id) triples.
    """
    if not samples:
        raise EmptyInput("evaluate needs at least one sample")
    tensors = [eval_transform(patch, aug_cfg, stain_params) for patch, _, _ in samples]
    scores = _forward_scores(params, model_cfg, tensors)
    scored = [
        ScoredSample(score=float(s), label=int(label), domain_id=int(domain))
        for s, (_, label, domain) in zip(scores, samples)
    ]
    return domain_report(scored, threshold)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    report: DomainReport
    val_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    train_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    normalize_failures: int = 0


def train_loop(
    dataset: list[tuple[np.ndarray, int, int]],
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    loss_cfg: LossConfig,
    aug_cfg: AugmentConfig,
    stain_params: StainParams,
    seed: int,
    numeric_mode: str = REFERENCE64,
    threshold: float = 0.5,
) -> TrainResult:
    """Full training protocol on an in-memory (patch, label, domain) dataset.

    Stratified train/val split, epochs of ceil(N/B) batches (inverse
    class-frequency sampling with replacement when enabled, shuffled chunks
    otherwise), hybrid loss with analytic gradients, AdamW with per-group
    learning rates, per-epoch validation, early stopping on balanced
    accuracy. Deterministic given the seed in reference numeric mode.

    Stain normalization is applied to each training patch once up front
    (it is a pure per-patch function, so this matches normalizing inside
    every transform call) and the per-sample transform then runs with
    normalization disabled.
    """
    if numeric_mode not in NUMERIC_MODES:
        raise ValueError(f"unknown numeric mode {numeric_mode!r}")
    dtype = np.float64 if numeric_mode == REFERENCE64 else np.float32

    labels = np.array([label for _, label, _ in dataset], dtype=np.intp)
    if labels.size == 0 or labels.min() == labels.max():
        raise MissingClass("training requires both classes in the dataset")

    train_idx, val_idx = stratified_split(
        labels, optim_cfg.val_fraction, _stream(seed, _STREAM_SPLIT)
    )
    train_labels = labels[train_idx]
    if train_labels.min() == train_labels.max():
        raise MissingClass("training split lost one of the classes")
    counts = ClassCounts(
        n_pos=int(train_labels.sum()), n_neg=int((train_labels == 0).sum())
    )
    loss_cfg = resolve_class_weights(loss_cfg, counts)

    # pre-normalize once; per-sample transforms then skip the stain stage
    normalize_failures = 0
    train_patches: list[np.ndarray] = []
    if aug_cfg.normalize_train:
        for i in train_idx:
            patch, ok = normalize_or_passthrough(dataset[i][0], stain_params)
            normalize_failures += not ok
            train_patches.append(patch)
    else:
        train_patches = [dataset[i][0] for i in train_idx]
    per_sample_aug = AugmentConfig(
        crop_fraction=aug_cfg.crop_fraction,
        out_size=aug_cfg.out_size,
        p_dihedral=aug_cfg.p_dihedral,
        brightness_range=aug_cfg.brightness_range,
        contrast_range=aug_cfg.contrast_range,
        mean=aug_cfg.mean,
        std=aug_cfg.std,
        normalize_train=False,
        normalize_eval=False,
    )

    val_samples = [dataset[i] for i in val_idx]
    val_tensors = [
        eval_transform(patch, aug_cfg, stain_params) for patch, _, _ in val_samples
    ]
    val_labels = [int(label) for _, label, _ in val_samples]
    val_domains = [int(domain) for _, _, domain in val_samples]

    params = init_model(model_cfg, _stream(seed, _STREAM_INIT))
    if dtype is np.float32:
        params = {k: p.astype(np.float32) for k, p in params.items()}
    groups = param_groups(params)
    state = init_adamw_state(params)
    stopper = EarlyStopState()

    n_train = len(train_idx)
    batches_per_epoch = math.ceil(n_train / optim_cfg.batch_size)
    best_params = {k: p.copy() for k, p in params.items()}
    best_report: DomainReport | None = None
    history: list[dict] = []

    for epoch in range(1, optim_cfg.max_epochs + 1):
        epoch_losses = []
        if not optim_cfg.balanced_sampling:
            perm = _stream(seed, _STREAM_SAMPLER, epoch).permutation(n_train)
        for b in range(batches_per_epoch):
            if optim_cfg.balanced_sampling:
                idx = sampler_draw(
                    counts,
                    train_labels,
                    optim_cfg.batch_size,
                    _stream(seed, _STREAM_SAMPLER, epoch, b),
                )
            else:
                idx = perm[b * optim_cfg.batch_size : (b + 1) * optim_cfg.batch_size]
                if idx.size == 0:
                    break
            tensors = [
                train_transform(
                    train_patches[i],
                    per_sample_aug,
                    stain_params,
                    _stream(seed, _STREAM_TRANSFORM, epoch, b, slot),
                )
                for slot, i in enumerate(idx)
            ]
            batch = np.stack(tensors).astype(dtype, copy=False)
            y = train_labels[idx]
            logits, cache = forward(params, model_cfg, batch)
            epoch_losses.append(combined_loss(y, logits, loss_cfg))
            dlogits = combined_grad(y, logits, loss_cfg)
            grads = backward(cache, dlogits)
            adamw_step(params, grads, state, optim_cfg, groups)

        scores = _forward_scores(params, model_cfg, val_tensors)
        scored = [
            ScoredSample(score=float(s), label=y_, domain_id=d_)
            for s, y_, d_ in zip(scores, val_labels, val_domains)
        ]
        report = domain_report(scored, threshold)
        val_bacc = report.overall_pooled.bacc
        prev_best = stopper.best_bacc
        stopper, stop = early_stop_update(
            stopper, epoch, val_bacc, optim_cfg.patience
        )
        if stopper.best_bacc > prev_best and stopper.best_epoch == epoch:
            best_params = {k: p.copy() for k, p in params.items()}
            best_report = report

        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val": {
                    "bacc": report.overall_pooled.bacc,
                    "accuracy": report.overall_pooled.accuracy,
                    "sensitivity": report.overall_pooled.sensitivity,
                    "specificity": report.overall_pooled.specificity,
                    "roc_auc": report.overall_pooled.roc_auc,
                },
                "lr": {
                    "head": optim_cfg.head_lr,
                    "backbone": optim_cfg.head_lr * optim_cfg.backbone_lr_ratio,
                },
                "early_stop": {
                    "best_bacc": None
                    if stopper.best_bacc == -math.inf
                    else stopper.best_bacc,
                    "best_epoch": stopper.best_epoch,
                    "epochs_since_improve": stopper.epochs_since_improve,
                    "stopped": stop,
                },
            }
        )
        if stop:
            break

    if best_report is None:
        # no epoch produced a defined balanced accuracy; report current state
        scores = _forward_scores(params, model_cfg, val_tensors)
        scored = [
            ScoredSample(score=float(s), label=y_, domain_id=d_)
            for s, y_, d_ in zip(scores, val_labels, val_domains)
        ]
        best_report = domain_report(scored, threshold)
        best_params = {k: p.copy() for k, p in params.items()}

    return TrainResult(
        params=best_params,
        history=history,
        report=best_report,
        val_indices=val_idx,
        train_indices=train_idx,
        normalize_failures=normalize_failures,
    )


def checkpoint_save(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    optim_state: AdamWState | None,
    epoch: int,
    best_bacc: float | None,
    path: str,
    numeric_mode: str = REFERENCE64,
    seed: int = 0,
    run_config: dict | None = None,
) -> None:
    """Write header.json plus params.bin into the directory ``path``."""
    if numeric_mode not in NUMERIC_MODES:
        raise ValueError(f"unknown numeric mode {numeric_mode!r}")
    os.makedirs(path, exist_ok=True)
    order = param_order(model_cfg)
    names = [name for name, _ in order]
    if list(params.keys()) != names:
        raise CorruptCheckpoint("parameter names do not match the model config")
    blob_dtype = "<f8" if numeric_mode == REFERENCE64 else "<f4"
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "numeric_mode": numeric_mode,
        "model": {
            "in_channels": model_cfg.in_channels,
            "stem_channels": model_cfg.stem_channels,
            "blocks": [list(b) for b in model_cfg.blocks],
            "transition_compression": model_cfg.transition_compression,
            "input_size": model_cfg.input_size,
        },
        "parameters": [
            {"name": name, "shape": list(shape)} for name, shape in order
        ],
        "epoch": epoch,
        "best_bacc": best_bacc,
        "seed": seed,
        "optim": {"t": optim_state.t if optim_state is not None else 0},
    }
    if run_config is not None:
        header["run_config"] = run_config
    with open(os.path.join(path, HEADER_FILE), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, BLOB_FILE), "wb") as fh:
        for name, shape in order:
            arr = params[name]
            if tuple(arr.shape) != tuple(shape):
                raise CorruptCheckpoint(f"shape mismatch for {name}")
            fh.write(np.ascontiguousarray(arr, dtype=blob_dtype).tobytes())


def checkpoint_load(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory; returns (params, header)."""
    header_path = os.path.join(path, HEADER_FILE)
    blob_path = os.path.join(path, BLOB_FILE)
    if not os.path.exists(header_path) or not os.path.exists(blob_path):
        raise CorruptCheckpoint(f"missing checkpoint files under {path}")
    try:
        with open(header_path, encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CorruptCheckpoint(
            f"unknown checkpoint format version {header.get('format_version')!r}"
        )
    mode = header.get("numeric_mode")
    if mode not in NUMERIC_MODES:
        raise CorruptCheckpoint(f"unknown numeric mode {mode!r}")
    dtype = np.dtype("<f8") if mode == REFERENCE64 else np.dtype("<f4")

    try:
        model_cfg = ModelConfig(
            in_channels=header["model"]["in_channels"],
            stem_channels=header["model"]["stem_channels"],
            blocks=tuple(tuple(b) for b in header["model"]["blocks"]),
            transition_compression=header["model"]["transition_compression"],
            input_size=header["model"]["input_size"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"invalid model config in header: {exc}") from exc

    try:
        declared = [(e["name"], tuple(e["shape"])) for e in header["parameters"]]
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"invalid parameter list in header: {exc}") from exc
    expected = [(name, tuple(shape)) for name, shape in param_order(model_cfg)]
    if declared != expected:
        raise CorruptCheckpoint("header parameter list does not match its config")

    blob = np.fromfile(blob_path, dtype=dtype)
    total = sum(int(np.prod(shape)) for _, shape in declared)
    if blob.size != total:
        raise CorruptCheckpoint(
            f"blob holds {blob.size} values, header declares {total}"
        )
    params: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in declared:
        count = int(np.prod(shape))
        params[name] = blob[cursor : cursor + count].reshape(shape).copy()
        cursor += count
    return params, header
