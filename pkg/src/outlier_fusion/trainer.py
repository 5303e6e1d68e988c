"""Deterministic toy CNN trainer that exercises every kernel end to end.

The model is a 3-block CNN (conv + ReLU + 2x2 average downsample) with an
optional multi-head attention block either ahead of the stem ("self"
placement) or on the final activation volume ("traditional"), followed by
generalized max-pooling (or plain global max-pooling) and a linear
classifier trained with softmax focal loss under Adam. Everything is plain
numpy with hand-derived gradients; a fixed seed reproduces runs bit for bit.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .attention import (AttentionConfig, Placement, multi_head_attention,
                        multi_head_attention_backward, init_multi_head_params)
from .dgmp import DgmpSolution, _dgmp_phi_grad, dgmp_forward
from .errors import ConfigError, DomainError, ShapeMismatchError, TrainingDivergedError
from .focal import FocalLossConfig, focal_loss_batch, softmax
from .metrics import MetricsReport, evaluate, holdout_split
from .numeric import (RngStream, conv2d_batch, conv2d_batch_input_grad,
                      conv2d_batch_kernel_grad)


@dataclasses.dataclass
class ToyModelConfig:
    in_channels: int = 1
    image_size: int = 16
    channels: tuple[int, int, int] = (8, 16, 16)
    n_classes: int = 4
    pooling: str = "dgmp"            # "dgmp" | "maxpool"
    dgmp_lambda: float = 1.0
    attention: AttentionConfig | None = None
    # fixed logit temperature; keeps small-lr training able to reach
    # confident predictions within a few hundred Adam steps
    logit_scale: float = 24.0

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be divisible by 4 (two 2x2 downsamples)")
        if self.pooling not in ("dgmp", "maxpool"):
            raise ConfigError(f"pooling must be 'dgmp' or 'maxpool', got {self.pooling!r}")
        if self.attention is not None:
            d = (self.in_channels if self.attention.placement is Placement.SELF
                 else self.channels[2])
            if d % self.attention.reduction != 0:
                raise ConfigError(
                    f"attention reduction {self.attention.reduction} does not divide "
                    f"depth {d} at the {self.attention.placement.value} tap point")


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    train_fraction: float = 0.8
    focal: FocalLossConfig = dataclasses.field(default_factory=FocalLossConfig)
    seed: RngStream = RngStream(0)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclasses.dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float
    macro_f1: float
    specificity: float
    sensitivity: float


@dataclasses.dataclass
class TrainOutcome:
    trace: list[EpochStats]
    params: dict[str, np.ndarray]
    train_indices: np.ndarray
    test_indices: np.ndarray
    test_report: MetricsReport


class Adam:
    """Standard Adam with bias correction; state keyed like the param dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1c
            v_hat = self.v[k] / b2c
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_toy_params(cfg: ToyModelConfig, rng: RngStream) -> dict[str, np.ndarray]:
    """He-initialized convs, zero biases, zero-initialized classifier."""
    params: dict[str, np.ndarray] = {}
    c_prev = cfg.in_channels
    for b, c_out in enumerate(cfg.channels, start=1):
        gen = rng.derive(b).generator()
        fan_in = c_prev * 9
        params[f"conv{b}.w"] = gen.normal(0.0, math.sqrt(2.0 / fan_in),
                                          size=(c_out, c_prev, 3, 3))
        params[f"conv{b}.b"] = np.zeros(c_out)
        c_prev = c_out
    if cfg.attention is not None:
        d = (cfg.in_channels if cfg.attention.placement is Placement.SELF
             else cfg.channels[2])
        for name, arr in init_multi_head_params(d, cfg.attention, rng.derive(7)).items():
            params[f"attn.{name}"] = arr
    params["cls.w"] = np.zeros((cfg.n_classes, cfg.channels[2]))
    params["cls.b"] = np.zeros(cfg.n_classes)
    return params


def _attn_view(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len("attn."):]: v for k, v in params.items() if k.startswith("attn.")}


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_grad(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0


def _forward(params: dict[str, np.ndarray], x: np.ndarray, cfg: ToyModelConfig):
    cache: dict = {}
    h = x
    acfg = cfg.attention
    if acfg is not None and acfg.placement is Placement.SELF:
        cache["attn_in"] = h
        attn = _attn_view(params)
        h = np.stack([multi_head_attention(h[i], acfg, attn) for i in range(h.shape[0])])
    for b in (1, 2, 3):
        cache[f"conv{b}_in"] = h
        z = conv2d_batch(h, params[f"conv{b}.w"], "same") \
            + params[f"conv{b}.b"][None, :, None, None]
        cache[f"z{b}"] = z
        a = np.maximum(z, 0.0)
        h = _avgpool2(a) if b < 3 else a
    if acfg is not None and acfg.placement is Placement.TRADITIONAL:
        cache["attn_in"] = h
        attn = _attn_view(params)
        h = np.stack([multi_head_attention(h[i], acfg, attn) for i in range(h.shape[0])])
    cache["pool_in"] = h

    n, d = h.shape[0], h.shape[1]
    if cfg.pooling == "dgmp":
        sols: list[DgmpSolution] = [dgmp_forward(h[i], cfg.dgmp_lambda) for i in range(n)]
        cache["dgmp"] = sols
        xi = np.stack([s.xi for s in sols])
    else:
        xi = h.reshape(n, d, -1).max(axis=2)
    cache["xi"] = xi
    logits = cfg.logit_scale * (xi @ params["cls.w"].T + params["cls.b"])
    return logits, cache


def _backward(params: dict[str, np.ndarray], cache: dict, dlogits: np.ndarray,
              cfg: ToyModelConfig) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    s = cfg.logit_scale
    xi = cache["xi"]
    grads["cls.w"] = s * dlogits.T @ xi
    grads["cls.b"] = s * dlogits.sum(axis=0)
    dxi = s * dlogits @ params["cls.w"]

    pool_in = cache["pool_in"]
    n, d = pool_in.shape[0], pool_in.shape[1]
    if cfg.pooling == "dgmp":
        dpool = np.empty_like(pool_in)
        for i in range(n):
            phi = pool_in[i].reshape(d, -1)
            dpool[i] = _dgmp_phi_grad(phi, cache["dgmp"][i], dxi[i]).reshape(pool_in.shape[1:])
    else:
        flat = pool_in.reshape(n, d, -1)
        arg = flat.argmax(axis=2)
        dflat = np.zeros_like(flat)
        ni, di = np.meshgrid(np.arange(n), np.arange(d), indexing="ij")
        dflat[ni, di, arg] = dxi
        dpool = dflat.reshape(pool_in.shape)

    h_grad = dpool
    acfg = cfg.attention
    if acfg is not None and acfg.placement is Placement.TRADITIONAL:
        h_grad = _attention_backward_batch(params, grads, cache["attn_in"], acfg, h_grad)

    for b in (3, 2, 1):
        if b < 3:
            h_grad = _avgpool2_grad(h_grad)
        da = h_grad * (cache[f"z{b}"] > 0)
        conv_in = cache[f"conv{b}_in"]
        grads[f"conv{b}.w"] = conv2d_batch_kernel_grad(
            da, conv_in, params[f"conv{b}.w"].shape, "same")
        grads[f"conv{b}.b"] = da.sum(axis=(0, 2, 3))
        h_grad = conv2d_batch_input_grad(da, params[f"conv{b}.w"],
                                         conv_in.shape[2:], "same")

    if acfg is not None and acfg.placement is Placement.SELF:
        _attention_backward_batch(params, grads, cache["attn_in"], acfg, h_grad)
    return grads


def _attention_backward_batch(params, grads, attn_in, acfg, upstream) -> np.ndarray:
    attn = _attn_view(params)
    out = np.empty_like(attn_in)
    for i in range(attn_in.shape[0]):
        gv, gp = multi_head_attention_backward(attn_in[i], acfg, attn, upstream[i])
        out[i] = gv
        for name, arr in gp.items():
            key = f"attn.{name}"
            if key in grads:
                grads[key] += arr
            else:
                grads[key] = arr.copy()
    return out


def forward_logits(params, cfg: ToyModelConfig, images, batch: int = 256) -> np.ndarray:
    """Logits for a stack of images, evaluated in memory-bounded batches."""
    images = np.asarray(images, dtype=float)
    chunks = [
        _forward(params, images[start:start + batch], cfg)[0]
        for start in range(0, images.shape[0], batch)
    ]
    return np.concatenate(chunks, axis=0)


def _evaluate_split(params, cfg, images, labels, focal_cfg) -> tuple[float, MetricsReport]:
    logits = forward_logits(params, cfg, images)
    loss, _ = focal_loss_batch(logits, labels, focal_cfg)
    pred = logits.argmax(axis=1)
    return loss, evaluate(labels, pred, cfg.n_classes)


def train_toy(images, labels, model_cfg: ToyModelConfig,
              train_cfg: TrainConfig) -> TrainOutcome:
    """Train the toy model on labeled images with a stratified 80/20 split.

    Raises :class:`TrainingDivergedError` with the offending step index if
    the loss ever goes non-finite. The whole run is a pure function of
    (data, configs): identical seeds give bit-identical parameters.
    """
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if images.ndim != 4 or images.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(
            f"expected (n, c, h, w) images with (n,) labels, got {images.shape} "
            f"and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model_cfg.n_classes):
        raise DomainError("labels out of range for the configured class count")

    train_idx, test_idx = holdout_split(labels, train_cfg.train_fraction,
                                        train_cfg.seed.derive(0))
    params = init_toy_params(model_cfg, train_cfg.seed.derive(1))
    adam = Adam(params, train_cfg.learning_rate, train_cfg.beta1,
                train_cfg.beta2, train_cfg.eps)

    trace: list[EpochStats] = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = train_cfg.seed.derive(100 + epoch).generator().permutation(train_idx.size)
        shuffled = train_idx[order]
        for start in range(0, shuffled.size, train_cfg.batch_size):
            batch = shuffled[start:start + train_cfg.batch_size]
            logits, cache = _forward(params, images[batch], model_cfg)
            loss, dlogits = focal_loss_batch(logits, labels[batch], train_cfg.focal)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}", step=step)
            grads = _backward(params, cache, dlogits, model_cfg)
            adam.step(params, grads)
            step += 1
        for split, idx in (("train", train_idx), ("test", test_idx)):
            loss, report = _evaluate_split(params, model_cfg, images[idx],
                                           labels[idx], train_cfg.focal)
            trace.append(EpochStats(
                epoch=epoch, split=split, loss=loss,
                accuracy=report.accuracy, macro_f1=report.macro_f1,
                specificity=report.macro_specificity,
                sensitivity=report.macro_sensitivity))

    _, test_report = _evaluate_split(params, model_cfg, images[test_idx],
                                     labels[test_idx], train_cfg.focal)
    return TrainOutcome(trace=trace, params=params, train_indices=train_idx,
                        test_indices=test_idx, test_report=test_report)


# ---------------------------------------------------------------------------
# synthetic data


def make_shape_dataset(n: int, image_size: int = 16, n_classes: int = 4,
                       rng: RngStream = RngStream(0), noise: float = 0.08,
                       jitter: int = 2, distractors: int = 0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Separable grayscale shapes: square, ring, cross and diagonal band.

    Each sample draws a small center jitter, an intensity factor and pixel
    noise; values are clipped to [0, 1]. Labels cycle 0..n_classes-1.
    ``distractors`` adds that many bright 3x3 patches at class-independent
    random positions, giving attention something worth suppressing.
    """
    if not 1 <= n_classes <= 4:
        raise DomainError("shape dataset supports 1 to 4 classes")
    gen = rng.generator()
    images = np.zeros((n, 1, image_size, image_size))
    labels = np.arange(n) % n_classes
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for i in range(n):
        dy, dx = gen.integers(-jitter, jitter + 1, size=2)
        cy, cx = image_size // 2 + dy, image_size // 2 + dx
        ay, ax = np.abs(yy - cy), np.abs(xx - cx)
        cls = labels[i]
        if cls == 0:
            mask = (ay <= 3) & (ax <= 3)
        elif cls == 1:
            ring = np.maximum(ay, ax)
            mask = (ring >= 4) & (ring <= 5)
        elif cls == 2:
            mask = (ay <= 1) | (ax <= 1)
        else:
            mask = np.abs((yy - cy) - (xx - cx)) <= 1
        img = mask * gen.uniform(0.7, 1.0) + gen.normal(0.0, noise, size=mask.shape)
        for _ in range(distractors):
            py, px = gen.integers(0, image_size - 3, size=2)
            img[py:py + 3, px:px + 3] = gen.uniform(0.9, 1.0)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return images, labels


# ---------------------------------------------------------------------------
# parameter and trace serialization

TRACE_COLUMNS = ("epoch", "split", "loss", "accuracy", "macro_f1",
                 "specificity", "sensitivity")


def write_trace_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(f"{row.epoch},{row.split},{row.loss:.10g},{row.accuracy:.10g},"
                     f"{row.macro_f1:.10g},{row.specificity:.10g},"
                     f"{row.sensitivity:.10g}\n")


def save_params(params: dict[str, np.ndarray], bin_path, manifest_path) -> None:
    """Flat little-endian float64 blob plus a text manifest (name, shape, offset)."""
    offset = 0
    with open(bin_path, "wb") as bf, open(manifest_path, "w", encoding="utf-8") as mf:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            data = arr.tobytes()
            shape = " ".join(str(s) for s in arr.shape)
            mf.write(f"{name}\t{shape}\t{offset}\n")
            bf.write(data)
            offset += len(data)


def load_params(bin_path, manifest_path) -> dict[str, np.ndarray]:
    with open(bin_path, "rb") as bf:
        blob = bf.read()
    params: dict[str, np.ndarray] = {}
    with open(manifest_path, "r", encoding="utf-8") as mf:
        for line in mf:
            line = line.rstrip("\n")
            if not line:
                continue
            name, shape_text, offset_text = line.split("\t")
            shape = tuple(int(s) for s in shape_text.split()) if shape_text else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count,
                                offset=int(offset_text)).reshape(shape)
            params[name] = arr.copy()
    return params
