"""Base network, specialized side layers and per-task fusion.

The trunk is a VGG-style stack of five stages separated by 2x2 max-poolings.
Each task head taps four stages (vessel: 1-4, disc: 2-5), applies a 3x3 side
convolution with K outputs to each tapped map, upsamples the results to the
input size, concatenates them and combines the 4K channels with a 1x1
convolution followed by a sigmoid.
"""
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .errors import ConfigError, ConsistencyError, SizeError
from .tensor import DTYPE, he_normal_init, zeros

N_STAGES = 5
MIN_SIZE = 16

HEAD_STAGES = {
    "vessel": (1, 2, 3, 4),
    "disc": (2, 3, 4, 5),
}
TASKS = tuple(HEAD_STAGES)


@dataclass(frozen=True)
class TaskHead:
    task: str
    stages: tuple

    @classmethod
    def named(cls, task):
        try:
            return cls(task, HEAD_STAGES[task])
        except KeyError:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}") from None


@dataclass(frozen=True)
class NetConfig:
    stage_channels: tuple = (64, 128, 256, 512, 512)
    convs_per_stage: tuple = (2, 2, 3, 3, 3)
    side_channels: int = 16
    width_scale: Fraction = Fraction(1)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "convs_per_stage", tuple(int(c) for c in self.convs_per_stage))
        try:
            object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        except (TypeError, ValueError):
            raise ConfigError(f"width_scale must be a rational number, got {self.width_scale!r}") from None
        if len(self.stage_channels) != N_STAGES or len(self.convs_per_stage) != N_STAGES:
            raise ConfigError("exactly 5 stages are required")
        if any(n < 1 for n in self.convs_per_stage):
            raise ConfigError("each stage needs at least one convolution")
        if self.side_channels < 1:
            raise ConfigError("side_channels (K) must be >= 1")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if any(c < 1 for c in self.scaled_channels):
            raise ConfigError(f"width_scale {self.width_scale} leaves a stage with no channels")

    @property
    def scaled_channels(self):
        return tuple(int(Fraction(c) / self.width_scale) for c in self.stage_channels)


class NetworkParams(dict):
    """Name -> tensor map for every trainable weight, tied to a NetConfig."""

    def __init__(self, config, tensors=()):
        super().__init__(tensors)
        self.config = config

    def copy(self):
        return NetworkParams(self.config, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype):
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    @classmethod
    def from_tensors(cls, config, tensors):
        """Wrap loaded tensors, checking them against the config's shape table."""
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise ConsistencyError(f"missing tensor {name!r} (expected shape {shape})")
            if tuple(tensors[name].shape) != shape:
                raise ConsistencyError(
                    f"tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                    f"architecture expects {shape}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise ConsistencyError(f"unexpected tensor {extra[0]!r}")
        return cls(config, {name: np.asarray(tensors[name], dtype=DTYPE) for name in expected})


def _conv_name(stage, idx):
    return f"stage{stage}.conv{idx}"


def param_shapes(config):
    """Ordered name -> shape table implied by ``config``."""
    shapes = {}
    chans = config.scaled_channels
    c_in = config.in_channels
    for s in range(1, N_STAGES + 1):
        c_out = chans[s - 1]
        for i in range(1, config.convs_per_stage[s - 1] + 1):
            shapes[f"{_conv_name(s, i)}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"{_conv_name(s, i)}.bias"] = (c_out,)
            c_in = c_out
    k = config.side_channels
    for task, stages in HEAD_STAGES.items():
        for s in stages:
            shapes[f"{task}.side{s}.weight"] = (k, chans[s - 1], 3, 3)
            shapes[f"{task}.side{s}.bias"] = (k,)
        shapes[f"{task}.fuse.weight"] = (1, k * len(stages), 1, 1)
        shapes[f"{task}.fuse.bias"] = (1,)
    return shapes


def build_network(config, seed):
    """He-initialized weights and zero biases, deterministic in ``seed``."""
    if not isinstance(config, NetConfig):
        raise ConfigError("build_network expects a NetConfig")
    params = NetworkParams(config)
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = he_normal_init(shape, fan_in, seed, name=name)
    return params


def stage_sizes(h, w):
    sizes = [(h, w)]
    for _ in range(N_STAGES - 1):
        h, w = -(-h // 2), -(-w // 2)
        sizes.append((h, w))
    return sizes


@dataclass
class ForwardTrace:
    params_id: int
    config: NetConfig
    heads: tuple
    image_shape: tuple
    stage_caches: list = field(default_factory=list)   # per stage: (pool cache | None, [(conv, relu)])
    stage_outputs: list = field(default_factory=list)
    head_caches: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)
    base_conv_calls: int = 0


def _normalize_heads(heads):
    if isinstance(heads, str):
        heads = [heads]
    out = []
    for h in heads:
        task = h.task if isinstance(h, TaskHead) else h
        TaskHead.named(task)
        if task not in out:
            out.append(task)
    if not out:
        raise ConfigError("at least one head must be requested")
    return tuple(t for t in TASKS if t in out)


def forward(params, image, heads=TASKS):
    """Run the trunk once and every requested head.

    Returns ``(probs, trace)`` where ``probs`` maps task name to a (1, H, W)
    probability map; the pre-sigmoid activations are in ``trace.activations``.
    """
    heads = _normalize_heads(heads)
    if image.ndim != 3 or image.shape[0] != params.config.in_channels:
        raise SizeError(f"expected a ({params.config.in_channels},H,W) image, got {image.shape}")
    _, H, W = image.shape
    if H < MIN_SIZE or W < MIN_SIZE:
        raise SizeError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")

    cfg = params.config
    trace = ForwardTrace(id(params), cfg, heads, image.shape)
    x = image
    for s in range(1, N_STAGES + 1):
        pool_cache = None
        if s > 1:
            x, pool_cache = ops.maxpool2x2(x)
        layer_caches = []
        for i in range(1, cfg.convs_per_stage[s - 1] + 1):
            name = _conv_name(s, i)
            x, conv_cache = ops.conv2d_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])
            x, relu_mask = ops.relu(x)
            trace.base_conv_calls += 1
            layer_caches.append((conv_cache, relu_mask))
        trace.stage_caches.append((pool_cache, layer_caches))
        trace.stage_outputs.append(x)

    probs = {}
    for task in heads:
        side_caches, resized = [], []
        for s in HEAD_STAGES[task]:
            feat = trace.stage_outputs[s - 1]
            side, side_cache = ops.conv2d_forward(
                feat, params[f"{task}.side{s}.weight"], params[f"{task}.side{s}.bias"])
            up, up_cache = ops.bilinear_resize(side, (H, W))
            side_caches.append((s, side_cache, up_cache))
            resized.append(up)
        volume, offsets = ops.concat_channels(resized)
        act, fuse_cache = ops.conv2d_forward(
            volume, params[f"{task}.fuse.weight"], params[f"{task}.fuse.bias"])
        trace.head_caches[task] = (side_caches, offsets, fuse_cache)
        trace.activations[task] = act
        probs[task] = ops.sigmoid(act)
    return probs, trace


def backward(params, trace, head_grads):
    """Backpropagate per-head gradients w.r.t. the fused activations.

    Returns a gradient map with the same names and shapes as ``params``.
    Parameters that no requested head depends on get exact zeros.
    """
    if trace.params_id != id(params) or trace.config != params.config:
        raise ConsistencyError("trace was produced by a forward pass with different parameters")
    unknown = set(head_grads) - set(trace.heads)
    if unknown:
        raise ConsistencyError(f"no forward trace for head(s) {sorted(unknown)}")

    grads = NetworkParams(params.config, {k: np.zeros_like(v) for k, v in params.items()})
    stage_grads = [None] * N_STAGES

    def _accumulate(s, g):
        stage_grads[s - 1] = g if stage_grads[s - 1] is None else stage_grads[s - 1] + g

    for task, g_act in head_grads.items():
        side_caches, offsets, fuse_cache = trace.head_caches[task]
        g_act = np.asarray(g_act)
        if g_act.shape != trace.activations[task].shape:
            raise ConsistencyError(
                f"{task} gradient shape {g_act.shape} != activation {trace.activations[task].shape}")
        g_vol, gw, gb = ops.conv2d_backward(g_act, fuse_cache)
        grads[f"{task}.fuse.weight"] += gw
        grads[f"{task}.fuse.bias"] += gb
        for (s, side_cache, up_cache), g_up in zip(side_caches, ops.concat_backward(g_vol, offsets)):
            g_side = ops.bilinear_resize_backward(g_up, up_cache)
            g_feat, gw, gb = ops.conv2d_backward(g_side, side_cache)
            grads[f"{task}.side{s}.weight"] += gw
            grads[f"{task}.side{s}.bias"] += gb
            _accumulate(s, g_feat)

    cfg = params.config
    for s in range(N_STAGES, 0, -1):
        g = stage_grads[s - 1]
        if g is None:
            continue
        pool_cache, layer_caches = trace.stage_caches[s - 1]
        for i in range(cfg.convs_per_stage[s - 1], 0, -1):
            conv_cache, relu_mask = layer_caches[i - 1]
            g = ops.relu_backward(g, relu_mask)
            g, gw, gb = ops.conv2d_backward(g, conv_cache)
            grads[f"{_conv_name(s, i)}.weight"] += gw
            grads[f"{_conv_name(s, i)}.bias"] += gb
        if pool_cache is not None:
            _accumulate(s - 1, ops.maxpool2x2_backward(g, pool_cache))
    return grads
