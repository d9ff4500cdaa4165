"""Parallel axial-attention (PAA) ResNet encoder.

Parameters live in flat ``name -> Tensor`` dictionaries named
``stem.*``, ``stage{i}.block{j}.*`` and ``fc.*`` so that the online and the
momentum encoder, checkpoints and the optimizer all share one layout.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .tensor import (
    BatchNormState,
    ConfigurationError,
    ContractError,
    DimensionError,
    Tensor,
    avg_pool2d,
    batch_norm,
    concat,
    conv1d,
    conv2d,
    global_avg_pool,
    l2_normalize,
    matmul,
    max_pool2d,
    relu,
    rel_gather,
    rel_scatter,
    reshape,
    softmax_axis,
    transpose,
)
from .tensor.core import default_dtype

EMBED_DIM = 128
DEFAULT_HEADS = 8
SHUFFLE_KERNEL = 3


@dataclass(frozen=True)
class EncoderVariant:
    name: str
    multiplier: float
    stem_channels: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    depths: tuple[int, ...]
    widths: tuple[int, ...]
    image_size: int
    paa_blocks: int = 3
    heads: int = DEFAULT_HEADS
    embed_dim: int = EMBED_DIM

    def with_paa_blocks(self, n: int) -> "EncoderVariant":
        return replace(self, paa_blocks=int(n))

    def with_image_size(self, size: int) -> "EncoderVariant":
        return replace(self, image_size=int(size))

    @property
    def bottleneck_widths(self) -> tuple[int, ...]:
        return tuple(int(round(w * self.multiplier)) for w in self.widths)


def _resnet50(name: str, mult: float) -> EncoderVariant:
    return EncoderVariant(
        name=name, multiplier=mult, stem_channels=int(64 * mult), stem_kernel=7,
        stem_stride=2, stem_pool=True, depths=(3, 4, 6, 3), widths=(64, 128, 256, 512),
        image_size=224,
    )


VARIANTS: dict[str, EncoderVariant] = {
    "XS": EncoderVariant(
        name="XS", multiplier=1.0, stem_channels=16, stem_kernel=3, stem_stride=2,
        stem_pool=True, depths=(2, 2), widths=(16, 32), image_size=32,
    ),
    "S": _resnet50("S", 1.0),
    "M": _resnet50("M", 1.5),
    "L": _resnet50("L", 2.0),
}


def get_variant(name: str, paa_blocks: int | None = None, image_size: int | None = None) -> EncoderVariant:
    try:
        v = VARIANTS[name.upper()]
    except KeyError:
        raise ConfigurationError(f"unknown encoder variant {name!r}; choose from {sorted(VARIANTS)}") from None
    if paa_blocks is not None:
        v = v.with_paa_blocks(paa_blocks)
    if image_size is not None:
        v = v.with_image_size(image_size)
    return v


@dataclass(frozen=True)
class PAABlockConfig:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int
    height: int
    width: int
    heads: int = DEFAULT_HEADS
    attention: bool = True

    def __post_init__(self):
        if self.out_channels != 4 * self.bottleneck_channels:
            raise ConfigurationError("out_channels must be 4 x bottleneck_channels")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.attention and self.bottleneck_channels % self.heads:
            raise ConfigurationError(
                f"{self.bottleneck_channels} channels are not divisible by {self.heads} heads")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def head_dim(self) -> int:
        return self.bottleneck_channels // self.heads


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


@dataclass
class ParamSpec:
    shape: tuple[int, ...]
    init: str  # "kaiming", "normal:<std>", "ones", "zeros"
    decay: bool = True


def _bn_specs(prefix: str, channels: int) -> dict[str, ParamSpec]:
    return {
        f"{prefix}.gamma": ParamSpec((channels,), "ones", decay=False),
        f"{prefix}.beta": ParamSpec((channels,), "zeros", decay=False),
    }


def attention_param_specs(prefix: str, channels: int, length: int, heads: int) -> dict[str, ParamSpec]:
    d = channels // heads
    specs = {
        f"{prefix}.wq": ParamSpec((channels, channels), f"normal:{1 / math.sqrt(channels)}"),
        f"{prefix}.wk": ParamSpec((channels, channels), f"normal:{1 / math.sqrt(channels)}"),
        f"{prefix}.wv": ParamSpec((channels, channels), f"normal:{1 / math.sqrt(channels)}"),
    }
    for r in ("rq", "rk", "rv"):
        specs[f"{prefix}.{r}"] = ParamSpec((2 * length - 1, d), f"normal:{1 / math.sqrt(d)}", decay=False)
    specs.update(_bn_specs(f"{prefix}.bn_logits", heads))
    specs.update(_bn_specs(f"{prefix}.bn_output", channels))
    return specs


def block_param_specs(prefix: str, cfg: PAABlockConfig) -> dict[str, ParamSpec]:
    cb, co = cfg.bottleneck_channels, cfg.out_channels
    specs = {f"{prefix}.reduce": ParamSpec((cb, cfg.in_channels, 1, 1), "kaiming")}
    specs.update(_bn_specs(f"{prefix}.bn1", cb))
    if cfg.attention:
        specs.update(attention_param_specs(f"{prefix}.attn_h", cb, cfg.height, cfg.heads))
        specs.update(attention_param_specs(f"{prefix}.attn_w", cb, cfg.width, cfg.heads))
        specs[f"{prefix}.shuffle_h"] = ParamSpec((cb, cb, SHUFFLE_KERNEL), "kaiming")
        specs[f"{prefix}.shuffle_w"] = ParamSpec((cb, cb, SHUFFLE_KERNEL), "kaiming")
        specs[f"{prefix}.mix"] = ParamSpec((co, 2 * cb, 1, 1), "kaiming")
    else:
        specs[f"{prefix}.conv"] = ParamSpec((cb, cb, 3, 3), "kaiming")
        specs.update(_bn_specs(f"{prefix}.bn2", cb))
        specs[f"{prefix}.mix"] = ParamSpec((co, cb, 1, 1), "kaiming")
    specs.update(_bn_specs(f"{prefix}.bn3", co))
    if cfg.needs_projection:
        specs[f"{prefix}.proj"] = ParamSpec((co, cfg.in_channels, 1, 1), "kaiming")
        specs.update(_bn_specs(f"{prefix}.bn_proj", co))
    return specs


def block_plan(variant: EncoderVariant) -> list[tuple[str, PAABlockConfig]]:
    """Per-block configuration; the last ``paa_blocks`` blocks use attention."""
    size = variant.image_size
    if size % variant.stem_stride:
        raise DimensionError(f"image size {size} not divisible by stem stride {variant.stem_stride}")
    size //= variant.stem_stride
    if variant.stem_pool:
        size //= 2
    total = sum(variant.depths)
    if not 0 <= variant.paa_blocks <= total:
        raise ConfigurationError(f"paa_blocks must lie in [0, {total}], got {variant.paa_blocks}")
    first_paa = total - variant.paa_blocks
    plan = []
    in_ch = variant.stem_channels
    k = 0
    for i, (depth, cb) in enumerate(zip(variant.depths, variant.bottleneck_widths)):
        for j in range(depth):
            stride = 2 if (j == 0 and i > 0) else 1
            cfg = PAABlockConfig(
                in_channels=in_ch, bottleneck_channels=cb, out_channels=4 * cb, stride=stride,
                height=size, width=size, heads=variant.heads, attention=k >= first_paa,
            )
            plan.append((f"stage{i}.block{j}", cfg))
            in_ch = cfg.out_channels
            size //= stride
            k += 1
    return plan


def encoder_param_specs(variant: EncoderVariant) -> dict[str, ParamSpec]:
    specs = {"stem.conv": ParamSpec((variant.stem_channels, 3, variant.stem_kernel, variant.stem_kernel), "kaiming")}
    specs.update(_bn_specs("stem.bn", variant.stem_channels))
    plan = block_plan(variant)
    for prefix, cfg in plan:
        specs.update(block_param_specs(prefix, cfg))
    last = plan[-1][1].out_channels if plan else variant.stem_channels
    specs["fc.weight"] = ParamSpec((variant.embed_dim, last), f"normal:{1 / math.sqrt(last)}")
    specs["fc.bias"] = ParamSpec((variant.embed_dim,), "zeros", decay=False)
    return specs


def count_parameters(variant: EncoderVariant) -> int:
    return sum(int(np.prod(s.shape)) for s in encoder_param_specs(variant).values())


def init_param(spec: ParamSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "kaiming":
        fan_in = int(np.prod(spec.shape[1:]))
        std = math.sqrt(2.0 / fan_in)
    else:
        std = float(spec.init.split(":")[1])
    return (rng.standard_normal(spec.shape) * std).astype(dtype)


def bn_prefixes(specs: Mapping[str, ParamSpec]) -> list[str]:
    return [name[: -len(".gamma")] for name in specs if name.endswith(".gamma")]


# ---------------------------------------------------------------------------
# axial attention
# ---------------------------------------------------------------------------


def relative_index(length: int) -> np.ndarray:
    """``idx[i, j] = j - i + length - 1``: row of the offset table for query i, key j."""
    ar = np.arange(length)
    return ar[None, :] - ar[:, None] + length - 1


def _bn(x: Tensor, params, buffers, prefix: str, training: bool) -> Tensor:
    return batch_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                      buffers.get(prefix) if buffers is not None else None, training)


def attend_lines(lines: Tensor, params, buffers, prefix: str, heads: int, training: bool) -> Tensor:
    """Position-sensitive multi-head attention over the last axis of ``lines`` (N x C x L)."""
    n, c, length = lines.shape
    if c % heads:
        raise ConfigurationError(f"{c} channels are not divisible by {heads} heads")
    d = c // heads
    table_rows = params[f"{prefix}.rq"].shape[0]
    if table_rows != 2 * length - 1:
        raise DimensionError(
            f"positional table of {table_rows} offsets does not cover axis length {length}")
    q = reshape(matmul(params[f"{prefix}.wq"], lines), (n, heads, d, length))
    k = reshape(matmul(params[f"{prefix}.wk"], lines), (n, heads, d, length))
    v = reshape(matmul(params[f"{prefix}.wv"], lines), (n, heads, d, length))
    q_t = transpose(q, (0, 1, 3, 2))  # N,h,L,d
    k_t = transpose(k, (0, 1, 3, 2))
    # query/key against every offset, then shift into (query, key) layout
    q_rel = rel_gather(matmul(q_t, transpose(params[f"{prefix}.rq"])))
    rk_flipped = params[f"{prefix}.rk"][::-1]
    k_rel = transpose(rel_gather(matmul(k_t, transpose(rk_flipped))), (0, 1, 3, 2))
    logits = matmul(q_t, k) + q_rel + k_rel
    logits = _bn(logits, params, buffers, f"{prefix}.bn_logits", training)
    attn = softmax_axis(logits, axis=-1)
    out = matmul(attn, transpose(v, (0, 1, 3, 2))) + matmul(rel_scatter(attn), params[f"{prefix}.rv"])
    out = transpose(out, (0, 1, 3, 2))
    out = reshape(out, (n, c, length))
    return _bn(out, params, buffers, f"{prefix}.bn_output", training)


def to_lines(x: Tensor, axis: str) -> Tensor:
    b, c, h, w = x.shape
    if axis == "height":
        return reshape(transpose(x, (0, 3, 1, 2)), (b * w, c, h))
    if axis == "width":
        return reshape(transpose(x, (0, 2, 1, 3)), (b * h, c, w))
    raise ConfigurationError(f"axis must be 'height' or 'width', got {axis!r}")


def from_lines(lines: Tensor, axis: str, shape: tuple[int, int, int, int]) -> Tensor:
    b, _, h, w = shape
    c = lines.shape[1]
    if axis == "height":
        return transpose(reshape(lines, (b, w, c, h)), (0, 2, 3, 1))
    return transpose(reshape(lines, (b, h, c, w)), (0, 2, 1, 3))


def axial_attention_1d(x: Tensor, axis: str, params, buffers=None, prefix: str = "attn",
                       heads: int = DEFAULT_HEADS, training: bool = False) -> Tensor:
    """Attention along one spatial axis of ``x`` (B x C x H x W), same output shape."""
    lines = to_lines(x, axis)
    out = attend_lines(lines, params, buffers, prefix, heads, training)
    return from_lines(out, axis, (x.shape[0], out.shape[1], x.shape[2], x.shape[3]))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


_POOL_LOCK = threading.Lock()
_POOL: ThreadPoolExecutor | None = None
_WORKERS = 2


def set_branch_workers(n: int) -> None:
    """Number of threads for concurrent branch execution (1 disables it)."""
    global _POOL, _WORKERS
    with _POOL_LOCK:
        if _POOL is not None:
            _POOL.shutdown(wait=True)
        _POOL = None
        _WORKERS = max(1, int(n))


def branch_workers() -> int:
    return _WORKERS


def _pool() -> ThreadPoolExecutor:
    global _POOL
    with _POOL_LOCK:
        if _POOL is None:
            _POOL = ThreadPoolExecutor(max_workers=max(2, _WORKERS), thread_name_prefix="paa")
        return _POOL


def _branch(y: Tensor, axis: str, params, buffers, prefix: str, heads: int, training: bool) -> Tensor:
    tag = "h" if axis == "height" else "w"
    lines = to_lines(y, axis)
    a = relu(attend_lines(lines, params, buffers, f"{prefix}.attn_{tag}", heads, training))
    s = conv1d(a, params[f"{prefix}.shuffle_{tag}"], pad=SHUFFLE_KERNEL // 2)
    return from_lines(s, axis, y.shape)


def paa_block(x: Tensor, cfg: PAABlockConfig, params, buffers, prefix: str,
              training: bool, parallel: bool | None = None) -> Tensor:
    """Residual bottleneck whose spatial mixing is two axial attentions run side by side."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.height, cfg.width):
        raise DimensionError(f"{prefix}: input {x.shape} does not match block config {cfg}")
    y = relu(_bn(conv2d(x, params[f"{prefix}.reduce"]), params, buffers, f"{prefix}.bn1", training))
    if cfg.attention:
        if parallel is None:
            parallel = _WORKERS > 1
        args = (params, buffers, prefix, cfg.heads, training)
        if parallel:
            fut_h = _pool().submit(_branch, y, "height", *args)
            fut_w = _pool().submit(_branch, y, "width", *args)
            bh, bw = fut_h.result(), fut_w.result()
        else:
            bh = _branch(y, "height", *args)
            bw = _branch(y, "width", *args)
        merged = concat([bh, bw], axis=1)
        if cfg.stride == 2:
            merged = avg_pool2d(merged, 2)
    else:
        merged = relu(_bn(conv2d(y, params[f"{prefix}.conv"], stride=cfg.stride, pad=1),
                          params, buffers, f"{prefix}.bn2", training))
    out = _bn(conv2d(merged, params[f"{prefix}.mix"]), params, buffers, f"{prefix}.bn3", training)
    if cfg.needs_projection:
        shortcut = _bn(conv2d(x, params[f"{prefix}.proj"], stride=cfg.stride),
                       params, buffers, f"{prefix}.bn_proj", training)
    else:
        shortcut = x
    if shortcut.shape != out.shape:
        raise ConfigurationError(f"{prefix}: residual shapes {shortcut.shape} and {out.shape} differ")
    return relu(out + shortcut)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class PAAEncoder:
    """Stem -> PAA/bottleneck stages -> global average pool -> fc(128) -> L2 normalise."""

    def __init__(self, variant: EncoderVariant | str = "XS", seed: int = 0, dtype=None):
        if isinstance(variant, str):
            variant = get_variant(variant)
        self.variant = variant
        self.dtype = np.dtype(dtype or default_dtype())
        self.specs = encoder_param_specs(variant)
        self.plan = block_plan(variant)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(init_param(spec, rng, self.dtype), requires_grad=True, name=name, dtype=self.dtype)
            for name, spec in self.specs.items()
        }
        self.buffers: dict[str, BatchNormState] = {
            prefix: BatchNormState(self.specs[f"{prefix}.gamma"].shape[0], dtype=self.dtype)
            for prefix in bn_prefixes(self.specs)
        }

    # -- bookkeeping -----------------------------------------------------
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def decay_mask(self) -> dict[str, bool]:
        return {name: spec.decay for name, spec in self.specs.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics as plain arrays (checkpoint order)."""
        out = {name: p.data for name, p in self.params.items()}
        for prefix, st in self.buffers.items():
            out[f"{prefix}.running_mean"] = st.mean
            out[f"{prefix}.running_var"] = st.var
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=self.dtype)
        for prefix, st in self.buffers.items():
            st.mean[...] = arrays[f"{prefix}.running_mean"]
            st.var[...] = arrays[f"{prefix}.running_var"]

    def copy(self, requires_grad: bool = True) -> "PAAEncoder":
        clone = PAAEncoder.__new__(PAAEncoder)
        clone.variant, clone.dtype, clone.specs, clone.plan = self.variant, self.dtype, self.specs, self.plan
        clone.params = {n: Tensor(p.data.copy(), requires_grad=requires_grad, name=n, dtype=self.dtype)
                        for n, p in self.params.items()}
        clone.buffers = {}
        for prefix, st in self.buffers.items():
            new = BatchNormState(st.mean.shape[0], st.momentum, dtype=self.dtype)
            new.mean[...] = st.mean
            new.var[...] = st.var
            clone.buffers[prefix] = new
        return clone

    def frozen(self) -> "PAAEncoder":
        """Copy whose parameters take no gradient (for input-gradient work such as attacks)."""
        return self.copy(requires_grad=False)

    def astype(self, dtype) -> "PAAEncoder":
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        for n, p in clone.params.items():
            clone.params[n] = Tensor(p.data.astype(dtype), requires_grad=True, name=n, dtype=dtype)
        for st in clone.buffers.values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return clone

    # -- forward -----------------------------------------------------------
    def features(self, x: Tensor, training: bool, parallel: bool | None = None) -> Tensor:
        v = self.variant
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (v.image_size, v.image_size):
            raise DimensionError(
                f"variant {v.name} expects B x 3 x {v.image_size} x {v.image_size}, got {x.shape}")
        p, b = self.params, self.buffers
        h = conv2d(x, p["stem.conv"], stride=v.stem_stride, pad=v.stem_kernel // 2)
        h = relu(_bn(h, p, b, "stem.bn", training))
        if v.stem_pool:
            h = max_pool2d(h, 2)
        for prefix, cfg in self.plan:
            h = paa_block(h, cfg, p, b, prefix, training, parallel)
        pooled = global_avg_pool(h)
        return matmul(pooled, transpose(p["fc.weight"])) + p["fc.bias"]

    def forward(self, x, training: bool = False, parallel: bool | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        return l2_normalize(self.features(x, training, parallel))

    __call__ = forward


def encode(batch, encoder: PAAEncoder, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    return encoder.forward(batch, training=mode == "train")


def momentum_encoder_update(online: PAAEncoder | Mapping[str, Tensor],
                            momentum: PAAEncoder | Mapping[str, Tensor], m_enc: float) -> None:
    """In place: ``momentum <- m_enc * momentum + (1 - m_enc) * online`` for every parameter.

    Running batch-norm statistics follow the same moving average when both
    arguments are encoders.
    """
    on = online.params if isinstance(online, PAAEncoder) else online
    mo = momentum.params if isinstance(momentum, PAAEncoder) else momentum
    if list(on) != list(mo) or any(on[k].shape != mo[k].shape for k in on):
        raise ContractError("online and momentum parameter lists are not congruent")
    m = float(m_enc)
    for name, p in on.items():
        q = mo[name]
        q.data = (m * q.data + (1.0 - m) * p.data).astype(q.data.dtype)
    if isinstance(online, PAAEncoder) and isinstance(momentum, PAAEncoder):
        for prefix, st in online.buffers.items():
            ms = momentum.buffers[prefix]
            ms.mean[...] = m * ms.mean + (1.0 - m) * st.mean
            ms.var[...] = m * ms.var + (1.0 - m) * st.var
