"""Channel, spatial and coordinate attention heads plus their multi-head fusion.

All heads map a ``(d, h, w)`` activation volume to the same-shaped volume
scaled by sigmoid gates, so outputs never exceed inputs in magnitude.
Parameters live in flat ``{name: ndarray}`` dicts; every forward has a
matching analytic backward returning gradients for both the volume and the
parameters.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatchError
from .numeric import (RngStream, conv2d, conv2d_input_grad, conv2d_kernel_grad)


class Placement(enum.Enum):
    SELF = "self"            # attention ahead of the backbone stem
    TRADITIONAL = "traditional"  # attention on the final volume, before pooling


class AttentionHead(enum.Enum):
    CHANNEL = "channel"
    SPATIAL = "spatial"
    COORDINATE = "coordinate"


DEFAULT_HEADS = (AttentionHead.CHANNEL, AttentionHead.SPATIAL, AttentionHead.COORDINATE)


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    reduction: int = 16
    spatial_kernel: int = 7
    placement: Placement = Placement.TRADITIONAL
    heads: tuple[AttentionHead, ...] = DEFAULT_HEADS

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigError(f"reduction must be positive, got {self.reduction}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial kernel must be odd, got {self.spatial_kernel}")
        if not self.heads:
            raise ConfigError("attention head set must not be empty")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError(f"duplicate attention heads: {self.heads}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_volume(vol) -> np.ndarray:
    v = np.asarray(vol, dtype=float)
    if v.ndim != 3 or min(v.shape) < 1:
        raise ShapeMismatchError(f"activation volume must be (d, h, w), got {v.shape}")
    return v


def _check_reduction(d: int, reduction: int) -> int:
    if d % reduction != 0:
        raise DomainError(f"reduction {reduction} does not divide depth {d}")
    return d // reduction


# ---------------------------------------------------------------------------
# channel attention


def init_channel_params(d: int, reduction: int, rng: RngStream) -> dict[str, np.ndarray]:
    hidden = _check_reduction(d, reduction)
    gen = rng.generator()
    return {
        "w1": gen.normal(0.0, np.sqrt(2.0 / d), size=(hidden, d)),
        "b1": np.zeros(hidden),
        "w2": gen.normal(0.0, np.sqrt(2.0 / hidden), size=(d, hidden)),
        "b2": np.zeros(d),
    }


def _channel_mlp(params, x):
    z1 = params["w1"] @ x + params["b1"]
    h = np.maximum(z1, 0.0)
    return params["w2"] @ h + params["b2"], z1, h


def channel_attention(vol, params) -> tuple[np.ndarray, np.ndarray]:
    """Scale each channel by a gate from a shared MLP over avg- and max-pooling.

    Returns the scaled volume and the per-channel weights, all in (0, 1).
    """
    v = _as_volume(vol)
    avg = v.mean(axis=(1, 2))
    mx = v.max(axis=(1, 2))
    ya, _, _ = _channel_mlp(params, avg)
    ym, _, _ = _channel_mlp(params, mx)
    weights = _sigmoid(ya + ym)
    return v * weights[:, None, None], weights


def channel_attention_backward(vol, params, upstream):
    """Gradients of ``sum(upstream * output)`` w.r.t. the volume and params."""
    v = _as_volume(vol)
    g = np.asarray(upstream, dtype=float)
    if g.shape != v.shape:
        raise ShapeMismatchError(f"upstream shape {g.shape} != volume shape {v.shape}")
    d, h, w = v.shape
    avg = v.mean(axis=(1, 2))
    mx = v.max(axis=(1, 2))
    ya, z1a, ha = _channel_mlp(params, avg)
    ym, z1m, hm = _channel_mlp(params, mx)
    weights = _sigmoid(ya + ym)

    grad_v = g * weights[:, None, None]
    g_weights = (g * v).sum(axis=(1, 2))
    ds = g_weights * weights * (1.0 - weights)

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    pooled_grads = []
    for x, z1, hh in ((avg, z1a, ha), (mx, z1m, hm)):
        dh = params["w2"].T @ ds
        dz1 = dh * (z1 > 0)
        grads["w2"] += np.outer(ds, hh)
        grads["b2"] += ds
        grads["w1"] += np.outer(dz1, x)
        grads["b1"] += dz1
        pooled_grads.append(params["w1"].T @ dz1)
    d_avg, d_max = pooled_grads

    grad_v += d_avg[:, None, None] / (h * w)
    flat = v.reshape(d, -1)
    arg = flat.argmax(axis=1)
    grad_flat = grad_v.reshape(d, -1)
    grad_flat[np.arange(d), arg] += d_max
    return grad_flat.reshape(v.shape), grads


# ---------------------------------------------------------------------------
# spatial attention


def init_spatial_params(kernel_size: int, rng: RngStream) -> dict[str, np.ndarray]:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise DomainError(f"spatial kernel must be odd, got {kernel_size}")
    gen = rng.generator()
    fan_in = 2 * kernel_size * kernel_size
    return {"kernel": gen.normal(0.0, np.sqrt(2.0 / fan_in),
                                 size=(1, 2, kernel_size, kernel_size))}


def spatial_attention(vol, params) -> tuple[np.ndarray, np.ndarray]:
    """Scale each spatial location by a gate from a conv over channel stats.

    The conv sees the channel-average and channel-max maps stacked as two
    input channels and uses same-padding, so the gate map is exactly H x W.
    """
    v = _as_volume(vol)
    stats = np.stack([v.mean(axis=0), v.max(axis=0)])
    amap = _sigmoid(conv2d(stats, params["kernel"], padding="same")[0])
    return v * amap[None], amap


def spatial_attention_backward(vol, params, upstream):
    v = _as_volume(vol)
    g = np.asarray(upstream, dtype=float)
    if g.shape != v.shape:
        raise ShapeMismatchError(f"upstream shape {g.shape} != volume shape {v.shape}")
    d = v.shape[0]
    stats = np.stack([v.mean(axis=0), v.max(axis=0)])
    pre = conv2d(stats, params["kernel"], padding="same")[0]
    amap = _sigmoid(pre)

    grad_v = g * amap[None]
    g_amap = (g * v).sum(axis=0)
    d_pre = g_amap * amap * (1.0 - amap)
    d_stats = conv2d_input_grad(d_pre[None], params["kernel"], stats.shape[1:], "same")
    grad_kernel = conv2d_kernel_grad(d_pre[None], stats, params["kernel"].shape, "same")

    grad_v += d_stats[0][None] / d
    arg = v.argmax(axis=0)
    rows, cols = np.indices(arg.shape)
    np.add.at(grad_v, (arg, rows, cols), d_stats[1])
    return grad_v, {"kernel": grad_kernel}


# ---------------------------------------------------------------------------
# coordinate attention


def init_coordinate_params(d: int, reduction: int, rng: RngStream) -> dict[str, np.ndarray]:
    hidden = _check_reduction(d, reduction)
    gen = rng.generator()
    return {
        "w1": gen.normal(0.0, np.sqrt(2.0 / d), size=(hidden, d)),
        "b1": np.zeros(hidden),
        "wh": gen.normal(0.0, np.sqrt(2.0 / hidden), size=(d, hidden)),
        "bh": np.zeros(d),
        "ww": gen.normal(0.0, np.sqrt(2.0 / hidden), size=(d, hidden)),
        "bw": np.zeros(d),
    }


def coordinate_attention(vol, params) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Direction-aware gating: pool along width and height, transform jointly,
    then gate rows (d x h) and columns (d x w) separately.

    Returns ``(scaled volume, row map, column map)``.
    """
    v = _as_volume(vol)
    d, h, w = v.shape
    pooled_h = v.mean(axis=2)             # (d, h)
    pooled_w = v.mean(axis=1)             # (d, w)
    joint = np.concatenate([pooled_h, pooled_w], axis=1)
    z = params["w1"] @ joint + params["b1"][:, None]
    a = np.maximum(z, 0.0)
    ah, aw = a[:, :h], a[:, h:]
    row_map = _sigmoid(params["wh"] @ ah + params["bh"][:, None])
    col_map = _sigmoid(params["ww"] @ aw + params["bw"][:, None])
    return v * row_map[:, :, None] * col_map[:, None, :], row_map, col_map


def coordinate_attention_backward(vol, params, upstream):
    v = _as_volume(vol)
    g = np.asarray(upstream, dtype=float)
    if g.shape != v.shape:
        raise ShapeMismatchError(f"upstream shape {g.shape} != volume shape {v.shape}")
    d, h, w = v.shape
    pooled_h = v.mean(axis=2)
    pooled_w = v.mean(axis=1)
    joint = np.concatenate([pooled_h, pooled_w], axis=1)
    z = params["w1"] @ joint + params["b1"][:, None]
    a = np.maximum(z, 0.0)
    ah, aw = a[:, :h], a[:, h:]
    row_map = _sigmoid(params["wh"] @ ah + params["bh"][:, None])
    col_map = _sigmoid(params["ww"] @ aw + params["bw"][:, None])

    grad_v = g * row_map[:, :, None] * col_map[:, None, :]
    g_row = (g * v * col_map[:, None, :]).sum(axis=2)
    g_col = (g * v * row_map[:, :, None]).sum(axis=1)

    d_row_pre = g_row * row_map * (1.0 - row_map)
    d_col_pre = g_col * col_map * (1.0 - col_map)
    grads = {
        "wh": d_row_pre @ ah.T,
        "bh": d_row_pre.sum(axis=1),
        "ww": d_col_pre @ aw.T,
        "bw": d_col_pre.sum(axis=1),
    }
    d_a = np.concatenate([params["wh"].T @ d_row_pre,
                          params["ww"].T @ d_col_pre], axis=1)
    d_z = d_a * (z > 0)
    grads["w1"] = d_z @ joint.T
    grads["b1"] = d_z.sum(axis=1)
    d_joint = params["w1"].T @ d_z
    grad_v += d_joint[:, :h][:, :, None] / w
    grad_v += d_joint[:, h:][:, None, :] / h
    return grad_v, grads


# ---------------------------------------------------------------------------
# multi-head combination


def init_multi_head_params(d: int, cfg: AttentionConfig, rng: RngStream) -> dict[str, np.ndarray]:
    """Per-head parameters plus the 1x1 projection back to depth d."""
    params: dict[str, np.ndarray] = {}
    for idx, head in enumerate(cfg.heads):
        sub = rng.derive(idx)
        if head is AttentionHead.CHANNEL:
            head_params = init_channel_params(d, cfg.reduction, sub)
        elif head is AttentionHead.SPATIAL:
            head_params = init_spatial_params(cfg.spatial_kernel, sub)
        else:
            head_params = init_coordinate_params(d, cfg.reduction, sub)
        for name, arr in head_params.items():
            params[f"{head.value}.{name}"] = arr
    # identity-block projection start: the fused output begins as the head
    # average, so an untrained block passes signal through instead of mixing it
    concat_depth = len(cfg.heads) * d
    gen = rng.derive(len(cfg.heads)).generator()
    proj = np.tile(np.eye(d), len(cfg.heads)) / len(cfg.heads)
    proj += gen.normal(0.0, 0.01, size=(d, concat_depth))
    params["proj.w"] = proj
    params["proj.b"] = np.zeros(d)
    return params


def _head_params(params, head: AttentionHead) -> dict[str, np.ndarray]:
    prefix = head.value + "."
    return {name[len(prefix):]: arr for name, arr in params.items()
            if name.startswith(prefix)}


def _head_forward(vol, head: AttentionHead, head_params):
    if head is AttentionHead.CHANNEL:
        return channel_attention(vol, head_params)[0]
    if head is AttentionHead.SPATIAL:
        return spatial_attention(vol, head_params)[0]
    return coordinate_attention(vol, head_params)[0]


def multi_head_attention(vol, cfg: AttentionConfig, params) -> np.ndarray:
    """Concatenate the attended volumes of every configured head along depth,
    then project back to the input depth with a learned 1x1 transform."""
    v = _as_volume(vol)
    if not cfg.heads:
        raise ConfigError("attention head set must not be empty")
    concat = np.concatenate(
        [_head_forward(v, head, _head_params(params, head)) for head in cfg.heads],
        axis=0)
    return (np.einsum("oc,chw->ohw", params["proj.w"], concat)
            + params["proj.b"][:, None, None])


def multi_head_attention_backward(vol, cfg: AttentionConfig, params, upstream):
    v = _as_volume(vol)
    g = np.asarray(upstream, dtype=float)
    if g.shape != v.shape:
        raise ShapeMismatchError(f"upstream shape {g.shape} != volume shape {v.shape}")
    d = v.shape[0]
    head_outs = [_head_forward(v, head, _head_params(params, head)) for head in cfg.heads]
    concat = np.concatenate(head_outs, axis=0)

    grads = {
        "proj.w": np.einsum("ohw,chw->oc", g, concat),
        "proj.b": g.sum(axis=(1, 2)),
    }
    d_concat = np.einsum("oc,ohw->chw", params["proj.w"], g)
    grad_v = np.zeros_like(v)
    backward = {
        AttentionHead.CHANNEL: channel_attention_backward,
        AttentionHead.SPATIAL: spatial_attention_backward,
        AttentionHead.COORDINATE: coordinate_attention_backward,
    }
    for idx, head in enumerate(cfg.heads):
        gv, gp = backward[head](v, _head_params(params, head), d_concat[idx * d:(idx + 1) * d])
        grad_v += gv
        for name, arr in gp.items():
            grads[f"{head.value}.{name}"] = arr
    return grad_v, grads
