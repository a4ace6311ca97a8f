"""
This module contains the builders and the forward/backward drivers of the four networks:
the bicubic look-alike generator, the SR generator, the discriminator and the end-to-end baseline.

A `ModelGraph` is an ordered list of layers plus skip links. A skip link combines the output of
`source` (-1 is the network input) into the output of `target`, by addition or channel concatenation.
"""

import collections
import dataclasses
import hashlib
import logging
import typing

import annotated_types
import numpy as np
import pydantic

from . import config
from .nn import functional as F
from .nn.tensor import Parameter, ShapeMismatchException
from .utils import RbsrException

logger = logging.getLogger("rbsr.models")

_Positive = typing.Annotated[int, annotated_types.Ge(1)]


class ModelConfigException(RbsrException):
    pass


class GeneratorConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    n_res_blocks: _Positive = config.LOOKALIKE_BLOCKS
    channels: _Positive = config.CHANNELS
    in_channels: typing.Literal[3] = 3
    out_channels: typing.Literal[3] = 3


class SRConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    n_res_blocks: _Positive = config.SR_BLOCKS
    channels: _Positive = config.CHANNELS
    scale: typing.Literal[4] = 4


class DiscriminatorConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    base_channels: _Positive = 64
    n_stages: _Positive = 4
    dense_width: _Positive = 1024
    input_size: _Positive = config.CROP


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | relu | sigmoid | flatten | dense | shuffle
    weight: typing.Optional[str] = None
    bias: typing.Optional[str] = None
    stride: int = 1
    pad: int = 0
    factor: int = 1


@dataclasses.dataclass(frozen=True)
class SkipLink:
    source: int
    target: int
    combine: str  # add | concat


@dataclasses.dataclass
class Trace:
    x: np.ndarray
    inputs: typing.List[np.ndarray]
    outputs: typing.List[np.ndarray]

    @property
    def last(self) -> int:
        return len(self.outputs) - 1


@dataclasses.dataclass(eq=False)
class ModelGraph:
    role: str
    layers: typing.List[LayerSpec]
    skip_links: typing.List[SkipLink]
    params: "collections.OrderedDict[str, Parameter]"
    block_ends: typing.List[int] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        for layer in self.layers:
            for name in (layer.weight, layer.bias):
                if name is not None and name not in self.params:
                    raise ModelConfigException(f"layer {layer.name} references missing parameter {name}")
        for link in self.skip_links:
            if not (-1 <= link.source < link.target < len(self.layers)) or link.combine not in ("add", "concat"):
                raise ModelConfigException(f"invalid skip link {link}")
        self._skips = collections.defaultdict(list)
        for link in self.skip_links:
            self._skips[link.target].append(link)

    def parameters(self) -> typing.List[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> "ModelGraph":
        for p in self.params.values():
            p.frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params.values())

    def astype(self, dtype) -> "ModelGraph":
        params = collections.OrderedDict((n, p.astype(dtype)) for n, p in self.params.items())
        return ModelGraph(self.role, self.layers, self.skip_links, params, list(self.block_ends))

    def state_dict(self) -> "collections.OrderedDict[str, np.ndarray]":
        return collections.OrderedDict((n, p.value) for n, p in self.params.items())

    def load_state(self, tensors: typing.Mapping[str, np.ndarray]):
        missing = set(self.params) - set(tensors)
        unexpected = set(tensors) - set(self.params)
        if missing or unexpected:
            raise ModelConfigException(
                f"checkpoint does not fit {self.role} model: missing {sorted(missing)[:5]}, "
                f"unexpected {sorted(unexpected)[:5]}"
            )
        for name, param in self.params.items():
            value = tensors[name]
            if value.shape != param.value.shape:
                raise ModelConfigException(f"{name}: checkpoint shape {value.shape} != model shape {param.value.shape}")
            param.value[...] = value

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, param in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(param.value).tobytes())
        return digest.hexdigest()

    def _apply(self, layer: LayerSpec, h: np.ndarray) -> np.ndarray:
        if layer.kind == "conv":
            return F.conv2d(h, self.params[layer.weight].value, self.params[layer.bias].value, layer.stride, layer.pad)
        if layer.kind in ("relu", "sigmoid"):
            return F.activation(h, layer.kind)
        if layer.kind == "flatten":
            return h.reshape(h.shape[0], -1)
        if layer.kind == "dense":
            return F.dense(h, self.params[layer.weight].value, self.params[layer.bias].value)
        if layer.kind == "shuffle":
            return F.pixel_shuffle(h, layer.factor)
        raise ModelConfigException(f"unknown layer kind {layer.kind}")

    def _backprop(self, layer: LayerSpec, h: np.ndarray, g: np.ndarray, param_grads: bool) -> np.ndarray:
        if layer.kind == "conv":
            w = self.params[layer.weight]
            dx, dw, db = F.conv2d_grad(h, w.value, g, layer.stride, layer.pad)
        elif layer.kind == "dense":
            w = self.params[layer.weight]
            dx, dw, db = F.dense_grad(h, w.value, g)
        elif layer.kind in ("relu", "sigmoid"):
            return F.activation_grad(h, g, layer.kind)
        elif layer.kind == "flatten":
            return g.reshape(h.shape)
        elif layer.kind == "shuffle":
            return F.pixel_unshuffle(g, layer.factor)
        else:
            raise ModelConfigException(f"unknown layer kind {layer.kind}")
        if param_grads:
            w.grad += dw
            self.params[layer.bias].grad += db
        return dx

    def forward(self, x: np.ndarray, stop_after: typing.Optional[int] = None) -> typing.Tuple[np.ndarray, Trace]:
        """
        Run layers in order, up to and including `stop_after` when given.

        Raises:
            ShapeMismatchException: with the failing layer's name.
        """
        last = len(self.layers) - 1 if stop_after is None else stop_after
        trace = Trace(x=x, inputs=[], outputs=[])
        h = x
        for i, layer in enumerate(self.layers[: last + 1]):
            trace.inputs.append(h)
            try:
                h = self._apply(layer, h)
                for link in self._skips[i]:
                    other = x if link.source == -1 else trace.outputs[link.source]
                    if link.combine == "add":
                        if other.shape != h.shape:
                            raise ShapeMismatchException(f"add skip from {other.shape} to {h.shape}")
                        h = h + other
                    else:
                        if other.shape[0] != h.shape[0] or other.shape[2:] != h.shape[2:]:
                            raise ShapeMismatchException(f"concat skip from {other.shape} to {h.shape}")
                        h = np.concatenate([h, other], axis=1)
            except ShapeMismatchException as e:
                raise ShapeMismatchException(f"{self.role}.{layer.name}: {e}") from e
            trace.outputs.append(h)
        return h, trace

    def backward(self, trace: Trace, dy: np.ndarray, param_grads: bool = True) -> np.ndarray:
        """
        Propagate `dy` (gradient w.r.t. the traced output) back to the input, accumulating
        parameter gradients unless `param_grads` is False.
        """
        if dy.shape != trace.outputs[-1].shape:
            raise ShapeMismatchException(f"{self.role}: dy {dy.shape} != output {trace.outputs[-1].shape}")
        grads: typing.List[typing.Optional[np.ndarray]] = [None] * len(trace.outputs)
        grads[-1] = dy
        input_grad = np.zeros_like(trace.x)

        def accumulate(index: int, g: np.ndarray):
            nonlocal input_grad
            if index == -1:
                input_grad = input_grad + g
            else:
                grads[index] = g if grads[index] is None else grads[index] + g

        for i in reversed(range(len(trace.outputs))):
            g = grads[i]
            if g is None:
                g = np.zeros_like(trace.outputs[i])
            for link in reversed(self._skips[i]):
                if link.combine == "add":
                    accumulate(link.source, g)
                else:
                    other = trace.x if link.source == -1 else trace.outputs[link.source]
                    split = g.shape[1] - other.shape[1]
                    accumulate(link.source, g[:, split:])
                    g = g[:, :split]
            accumulate(i - 1, self._backprop(self.layers[i], trace.inputs[i], g, param_grads))
        return input_grad


def forward(model: ModelGraph, x: np.ndarray) -> typing.Tuple[np.ndarray, Trace]:
    return model.forward(x)


def backward(model: ModelGraph, trace: Trace, dy: np.ndarray) -> np.ndarray:
    return model.backward(trace, dy)


class _GraphBuilder:
    def __init__(self, role: str, seed: int):
        self.role = role
        self.rng = np.random.default_rng(seed)
        self.layers: typing.List[LayerSpec] = []
        self.skips: typing.List[SkipLink] = []
        self.params: "collections.OrderedDict[str, Parameter]" = collections.OrderedDict()
        self.block_ends: typing.List[int] = []

    def _param(self, name: str, shape: typing.Tuple[int, ...], fan_in: int) -> str:
        full = f"{self.role}.{name}"
        if fan_in:
            # Kaiming-uniform, fan-in mode, ReLU gain
            bound = np.sqrt(6.0 / fan_in)
            value = self.rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            value = np.zeros(shape, dtype=np.float32)
        self.params[full] = Parameter(full, value)
        return full

    def _add(self, layer: LayerSpec) -> int:
        self.layers.append(layer)
        return len(self.layers) - 1

    def conv(self, name: str, in_c: int, out_c: int, k: int = 3, stride: int = 1) -> int:
        weight = self._param(f"{name}.weight", (out_c, in_c, k, k), in_c * k * k)
        bias = self._param(f"{name}.bias", (out_c,), 0)
        return self._add(LayerSpec(name, "conv", weight, bias, stride=stride, pad=k // 2))

    def dense(self, name: str, in_f: int, out_f: int) -> int:
        weight = self._param(f"{name}.weight", (out_f, in_f), in_f)
        bias = self._param(f"{name}.bias", (out_f,), 0)
        return self._add(LayerSpec(name, "dense", weight, bias))

    def act(self, name: str, kind: str = "relu") -> int:
        return self._add(LayerSpec(name, kind))

    def flatten(self, name: str) -> int:
        return self._add(LayerSpec(name, "flatten"))

    def shuffle(self, name: str, factor: int) -> int:
        return self._add(LayerSpec(name, "shuffle", factor=factor))

    def skip(self, source: int, target: int, combine: str):
        self.skips.append(SkipLink(source, target, combine))

    def build(self) -> ModelGraph:
        model = ModelGraph(self.role, self.layers, self.skips, self.params, self.block_ends)
        logger.debug(f"Built {self.role} model: {len(self.layers)} layers, {model.parameter_count()} parameters")
        return model


def build_lookalike_generator(gen_config: GeneratorConfig, seed: int = 0, role: str = "gen") -> ModelGraph:
    """
    conv+ReLU head, residual blocks of two conv+ReLU pairs with additive skips, the last block
    concatenated with the head features, and a 3-channel output conv. Spatial size is preserved.
    """
    c = gen_config.channels
    b = _GraphBuilder(role, seed)
    b.conv("head", gen_config.in_channels, c)
    head = b.act("head.relu")
    prev = head
    for k in range(gen_config.n_res_blocks):
        b.conv(f"block{k}.conv1", c, c)
        b.act(f"block{k}.relu1")
        b.conv(f"block{k}.conv2", c, c)
        end = b.act(f"block{k}.relu2")
        b.skip(prev, end, "add")
        b.block_ends.append(end)
        prev = end
    b.skip(head, prev, "concat")
    b.conv("tail", 2 * c, gen_config.out_channels)
    return b.build()


def build_sr_generator(sr_config: SRConfig, seed: int = 0, role: str = "sr") -> ModelGraph:
    """
    EDSR-style x4 generator without normalization: head conv, conv-ReLU-conv residual blocks,
    body conv with a long additive skip, two conv + pixel-shuffle x2 stages and an output conv.
    """
    c = sr_config.channels
    b = _GraphBuilder(role, seed)
    head = b.conv("head", 3, c)
    prev = head
    for k in range(sr_config.n_res_blocks):
        b.conv(f"block{k}.conv1", c, c)
        b.act(f"block{k}.relu")
        end = b.conv(f"block{k}.conv2", c, c)
        b.skip(prev, end, "add")
        b.block_ends.append(end)
        prev = end
    body = b.conv("body", c, c)
    b.skip(head, body, "add")
    for stage in (1, 2):
        b.conv(f"up{stage}.conv", c, 4 * c)
        b.shuffle(f"up{stage}.shuffle", 2)
    b.conv("tail", c, 3)
    return b.build()


def build_discriminator(disc_config: DiscriminatorConfig, seed: int = 0, role: str = "disc") -> ModelGraph:
    """
    Stages of [conv stride 1 + ReLU, conv stride 2 + ReLU] doubling channels up to 512, then
    dense + ReLU, dense to one logit and a sigmoid. Output shape (n, 1).
    """
    reduction = 2**disc_config.n_stages
    if disc_config.input_size % reduction:
        raise ModelConfigException(
            f"input size {disc_config.input_size} is not divisible by 2^{disc_config.n_stages}"
        )
    b = _GraphBuilder(role, seed)
    in_c = 3
    for stage in range(disc_config.n_stages):
        out_c = min(disc_config.base_channels * 2**stage, 512)
        b.conv(f"stage{stage}.conv1", in_c, out_c)
        b.act(f"stage{stage}.relu1")
        b.conv(f"stage{stage}.conv2", out_c, out_c, stride=2)
        b.act(f"stage{stage}.relu2")
        in_c = out_c
    side = disc_config.input_size // reduction
    b.flatten("flatten")
    b.dense("fc1", in_c * side * side, disc_config.dense_width)
    b.act("fc1.relu")
    b.dense("fc2", disc_config.dense_width, 1)
    b.act("sigmoid", "sigmoid")
    return b.build()


def build_e2e_baseline(sr_config: SRConfig = SRConfig(n_res_blocks=config.E2E_BLOCKS), seed: int = 0) -> ModelGraph:
    return build_sr_generator(sr_config, seed, role="e2e")
