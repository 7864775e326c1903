"""Compact dense-connectivity CNN with a single-logit head.

Layout: a 3x3 stem convolution (pad 1) with ReLU, then dense blocks in
which every 3x3 layer consumes the channel-concatenation of the block
input and all previous layer outputs and appends ``growth_rate`` new
channels. Between blocks a 1x1 transition compresses channels by
``transition_compression`` (floor) and average-pools 2x2 with stride 2.
A global average pool feeds a linear head producing one logit per sample.

There is no batch normalization; layers are conv + bias + ReLU, which keeps
the forward pass deterministic and finite-difference checks clean. Batches
are (n, c, h, w) arrays; the backward pass is fully analytic, with
concatenation fan-out handled by accumulating gradient slices back into the
shared feature tensor.

Parameters live in an ordered dict with a fixed canonical naming scheme
(see param_order); the checkpoint format depends on that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, StaleCache


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 8
    blocks: tuple[tuple[int, int], ...] = ((2, 4), (2, 4))
    transition_compression: float = 0.5
    input_size: int = 224

    def __post_init__(self):
        self.blocks = tuple((int(l), int(g)) for l, g in self.blocks)
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.blocks:
            raise ValueError("at least one dense block is required")
        for layers, growth in self.blocks:
            if layers < 1 or growth < 1:
                raise ValueError("layers_per_block and growth_rate must be >= 1")
        if not 0 < self.transition_compression <= 1:
            raise ValueError("transition_compression must lie in (0, 1]")
        min_size = 2 ** (len(self.blocks) - 1)
        if self.input_size < min_size:
            raise ValueError(f"input_size must be at least {min_size}")


@dataclass
class ParamGroups:
    backbone: list[str]
    head: list[str]


def channel_trace(cfg: ModelConfig) -> list[int]:
    """Channel count entering each block, plus the head input count last."""
    trace = []
    channels = cfg.stem_channels
    for i, (layers, growth) in enumerate(cfg.blocks):
        trace.append(channels)
        channels += layers * growth
        if i < len(cfg.blocks) - 1:
            channels = int(np.floor(cfg.transition_compression * channels))
            if channels < 1:
                raise ValueError("transition compressed channels to zero")
    trace.append(channels)
    return trace


def head_channels(cfg: ModelConfig) -> int:
    return channel_trace(cfg)[-1]


def param_order(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) sequence; checkpoints rely on this order."""
    order: list[tuple[str, tuple[int, ...]]] = [
        ("stem.weight", (cfg.stem_channels, cfg.in_channels, 3, 3)),
        ("stem.bias", (cfg.stem_channels,)),
    ]
    channels = cfg.stem_channels
    for i, (layers, growth) in enumerate(cfg.blocks):
        for j in range(layers):
            c_in = channels + j * growth
            order.append((f"block{i}.layer{j}.weight", (growth, c_in, 3, 3)))
            order.append((f"block{i}.layer{j}.bias", (growth,)))
        channels += layers * growth
        if i < len(cfg.blocks) - 1:
            c_out = int(np.floor(cfg.transition_compression * channels))
            order.append((f"transition{i}.weight", (c_out, channels, 1, 1)))
            channels = c_out
    order.append(("head.weight", (1, channels)))
    order.append(("head.bias", (1,)))
    return order


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-style init: weights ~ N(0, sqrt(2 / fan_in)), biases zero."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_order(cfg):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def param_groups(params: dict[str, np.ndarray]) -> ParamGroups:
    """Head group is the final linear weight and bias; backbone is the rest."""
    head = [n for n in params if n.startswith("head.")]
    backbone = [n for n in params if not n.startswith("head.")]
    return ParamGroups(backbone=backbone, head=head)


_OFFSETS_3X3 = [(dy, dx) for dy in range(3) for dx in range(3)]


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (9c, n*h*w) column matrix with pad 1, offset-major."""
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (n, c, h, w, 3, 3) -> (3, 3, c, n, h, w) -> (9c, n*h*w)
    return np.ascontiguousarray(win.transpose(4, 5, 1, 0, 2, 3)).reshape(9 * c, -1)


def _wflat3x3(w: np.ndarray) -> np.ndarray:
    # (k, c, 3, 3) -> (k, 9c) with the offset-major layout of _im2col3x3
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(w.shape[0], -1)


def _conv3x3(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, return_cols: bool = False
):
    """3x3 convolution, pad 1; can hand back its column matrix for backward."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    cols = _im2col3x3(x)
    out = (_wflat3x3(w) @ cols).reshape(k, n, h * wd).transpose(1, 0, 2)
    out = np.ascontiguousarray(out).reshape(n, k, h, wd) + b[None, :, None, None]
    if return_cols:
        return out, cols
    return out


def _conv3x3_backward(
    in_shape: tuple[int, ...],
    cols: np.ndarray,
    w: np.ndarray,
    dout: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward from the cached column matrix of the forward pass."""
    n, c, h, wd = in_shape
    k = w.shape[0]
    do2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(k, -1)
    dw = (do2 @ cols.T).reshape(k, 3, 3, c).transpose(0, 3, 1, 2)
    dcols = _wflat3x3(w).T @ do2
    # one layout change, then batch-aligned scatter-adds per offset
    dct = np.ascontiguousarray(
        dcols.reshape(3, 3, c, n, h, wd).transpose(3, 2, 0, 1, 4, 5)
    )
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for dy, dx in _OFFSETS_3X3:
        dxp[:, :, dy : dy + h, dx : dx + wd] += dct[:, :, dy, dx]
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dw), db, dxp[:, :, 1 : h + 1, 1 : wd + 1]


def _conv1x1(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    k = w.shape[0]
    xs = x.transpose(1, 0, 2, 3).reshape(c, -1)
    out = (w[:, :, 0, 0] @ xs).reshape(k, n, h * wd).transpose(1, 0, 2)
    return np.ascontiguousarray(out.reshape(n, k, h, wd))


def _conv1x1_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    k = w.shape[0]
    xs = x.transpose(1, 0, 2, 3).reshape(c, -1)
    do2 = dout.transpose(1, 0, 2, 3).reshape(k, -1)
    dw = (do2 @ xs.T)[:, :, None, None]
    dx = (w[:, :, 0, 0].T @ do2).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    return dw, np.ascontiguousarray(dx)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    xt = x[:, :, : h2 * 2, : w2 * 2]
    return 0.25 * (
        xt[:, :, 0::2, 0::2]
        + xt[:, :, 1::2, 0::2]
        + xt[:, :, 0::2, 1::2]
        + xt[:, :, 1::2, 1::2]
    )


def _avgpool2_backward(dout: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    dx = np.zeros(in_shape, dtype=dout.dtype)
    h2, w2 = in_shape[2] // 2, in_shape[3] // 2
    spread = 0.25 * dout
    dx[:, :, 0 : h2 * 2 : 2, 0 : w2 * 2 : 2] += spread
    dx[:, :, 1 : h2 * 2 : 2, 0 : w2 * 2 : 2] += spread
    dx[:, :, 0 : h2 * 2 : 2, 1 : w2 * 2 : 2] += spread
    dx[:, :, 1 : h2 * 2 : 2, 1 : w2 * 2 : 2] += spread
    return dx


def forward(
    params: dict[str, np.ndarray], cfg: ModelConfig, batch: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Run the network; returns (logits of shape (n,), cache for backward).

    Each block's cache entry keeps the final concatenated feature tensor:
    the first ``c_in_j`` channels of that tensor are exactly layer j's
    input, and the slice at a layer's channel offset is its ReLU output,
    so no per-layer copies are stored.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeMismatch(f"expected a 4-d batch, got ndim={batch.ndim}")
    n, c, h, w = batch.shape
    if c != cfg.in_channels or h != cfg.input_size or w != cfg.input_size:
        raise ShapeMismatch(
            f"batch ({c}, {h}, {w}) does not match config "
            f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})"
        )

    feats, stem_cols = _conv3x3(
        batch, params["stem.weight"], params["stem.bias"], return_cols=True
    )
    np.maximum(feats, 0.0, out=feats)

    blocks_cache = []
    transitions_cache = []
    for i, (layers, growth) in enumerate(cfg.blocks):
        c_in = feats.shape[1]
        hh, ww = feats.shape[2], feats.shape[3]
        full = np.empty(
            (n, c_in + layers * growth, hh, ww), dtype=feats.dtype
        )
        full[:, :c_in] = feats
        layer_cols = []
        for j in range(layers):
            off = c_in + j * growth
            pre, cols = _conv3x3(
                full[:, :off],
                params[f"block{i}.layer{j}.weight"],
                params[f"block{i}.layer{j}.bias"],
                return_cols=True,
            )
            np.maximum(pre, 0.0, out=pre)
            full[:, off : off + growth] = pre
            layer_cols.append(cols)
        blocks_cache.append(
            {"feats": full, "c_in": c_in, "growth": growth, "cols": layer_cols}
        )
        feats = full
        if i < len(cfg.blocks) - 1:
            t = _conv1x1(full, params[f"transition{i}.weight"])
            transitions_cache.append({"in_shape": t.shape})
            feats = _avgpool2(t)

    final_h, final_w = feats.shape[2], feats.shape[3]
    pooled = feats.mean(axis=(2, 3))
    logits = pooled @ params["head.weight"].T[:, 0] + params["head.bias"][0]

    cache = {
        "cfg": cfg,
        "params": params,
        "batch": batch,
        "stem_cols": stem_cols,
        "blocks": blocks_cache,
        "transitions": transitions_cache,
        "pooled": pooled,
        "final_hw": (final_h, final_w),
        "dtype": feats.dtype,
    }
    return logits, cache


def backward(cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact analytic gradients for every parameter.

    ReLU masks are recovered from the cached activations (output > 0),
    concatenation routes gradient slices back into the shared feature
    tensor, and pooling distributes gradient uniformly.
    """
    cfg: ModelConfig = cache["cfg"]
    dlogits = np.asarray(dlogits, dtype=cache["dtype"]).reshape(-1)
    n = cache["batch"].shape[0]
    if dlogits.shape[0] != n:
        raise StaleCache(f"dlogits has {dlogits.shape[0]} entries for batch of {n}")

    grads: dict[str, np.ndarray] = {}
    pooled = cache["pooled"]

    # head: logits = pooled @ w.T + b
    grads["head.weight"] = (dlogits @ pooled)[None, :]
    grads["head.bias"] = np.array([dlogits.sum()], dtype=cache["dtype"])

    final_h, final_w = cache["final_hw"]
    last = cache["blocks"][-1]
    # d(pooled)/d(feats) spreads uniformly over spatial positions
    dpooled = dlogits[:, None] * cache["params"]["head.weight"][0][None, :]
    dfeats = np.broadcast_to(
        (dpooled / (final_h * final_w))[:, :, None, None],
        last["feats"].shape,
    ).copy()

    for i in range(len(cfg.blocks) - 1, -1, -1):
        block = cache["blocks"][i]
        full = block["feats"]
        c_in, growth = block["c_in"], block["growth"]
        layers = cfg.blocks[i][0]
        for j in range(layers - 1, -1, -1):
            off = c_in + j * growth
            out_slice = full[:, off : off + growth]
            dpre = dfeats[:, off : off + growth] * (out_slice > 0)
            dw, db, dx = _conv3x3_backward(
                full[:, :off].shape,
                block["cols"][j],
                cache["params"][f"block{i}.layer{j}.weight"],
                dpre,
            )
            grads[f"block{i}.layer{j}.weight"] = dw
            grads[f"block{i}.layer{j}.bias"] = db
            dfeats[:, :off] += dx
        dblock_in = dfeats[:, :c_in]

        if i > 0:
            trans = cache["transitions"][i - 1]
            dt = _avgpool2_backward(dblock_in, trans["in_shape"])
            prev_full = cache["blocks"][i - 1]["feats"]
            dw, dprev = _conv1x1_backward(
                prev_full, cache["params"][f"transition{i - 1}.weight"], dt
            )
            grads[f"transition{i - 1}.weight"] = dw
            dfeats = dprev
        else:
            stem_out = full[:, :c_in]
            dpre = dblock_in * (stem_out > 0)
            dw, db, _ = _conv3x3_backward(
                cache["batch"].shape,
                cache["stem_cols"],
                cache["params"]["stem.weight"],
                dpre,
            )
            grads["stem.weight"] = dw
            grads["stem.bias"] = db

    return grads
