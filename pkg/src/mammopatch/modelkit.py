"""Declarative model specs, shape/parameter accounting, and model instantiation.

A ModelSpec is either a plain layer list (the two-conv baseline) or a named
backbone plus the fixed two-layer head (dense-32 relu, dense-1 sigmoid) that
replaces the wide stock classifier heads of the archetype networks. Backbones
are pluggable providers so the same head contract runs against desk-scale toy
stacks here and against full feature extractors elsewhere.

The final dense layer is specified with sigmoid activation but instantiated as
a logit output; probabilities are materialized by ``predict`` / the network's
``predict_proba`` so training can use the numerically stable fused loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine.layers import (
    Activation,
    BatchNorm2D,
    Conv2D,
    Dense,
    DepthwiseConv2D,
    Flatten,
    GlobalAvgPool2D,
    Layer,
    MaxPool2D,
    ResidualBlock,
)
from .engine.network import Network
from .errors import ConfigError, IngestError, InputError, SpecError, WeightsUnavailableError

CONV2D = "conv2d"
MAXPOOL2D = "maxpool2d"
FLATTEN = "flatten"
DENSE = "dense"

_LAYER_KINDS = (CONV2D, MAXPOOL2D, FLATTEN, DENSE)
_ACTIVATIONS = (None, "relu", "sigmoid")

# dense layers at least this wide defer their weight-gradient GEMM so the
# whole step's rows go through one BLAS call (see engine.layers.Dense)
_DEFER_WGRAD_MIN = 65536

CHECKPOINT_FORMAT_VERSION = 1
SPEC_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One declarative layer: conv2d, maxpool2d, flatten, or dense."""

    kind: str
    filters: int | None = None
    units: int | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: str = "valid"
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind == CONV2D:
            if not self.filters or self.filters <= 0:
                raise SpecError("conv2d needs a positive filter count")
            if not self.kernel or min(self.kernel) <= 0:
                raise SpecError("conv2d needs a positive kernel")
        if self.kind == DENSE and (not self.units or self.units <= 0):
            raise SpecError("dense needs a positive unit count")
        if self.kind == MAXPOOL2D and (not self.kernel or min(self.kernel) <= 0):
            raise SpecError("maxpool2d needs a positive window")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        for name in ("filters", "units", "activation"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        for name in ("kernel", "stride"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value)
        if self.kind == CONV2D:
            out["padding"] = self.padding
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown layer spec field(s): {sorted(unknown)}")
        kwargs = dict(data)
        for name in ("kernel", "stride"):
            if kwargs.get(name) is not None:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def conv2d(filters: int, kernel=(3, 3), stride=(1, 1), padding="valid",
           activation="relu") -> LayerSpec:
    return LayerSpec(CONV2D, filters=filters, kernel=tuple(kernel),
                     stride=tuple(stride), padding=padding, activation=activation)


def maxpool2d(window=(2, 2), stride=None) -> LayerSpec:
    return LayerSpec(MAXPOOL2D, kernel=tuple(window),
                     stride=tuple(stride) if stride else tuple(window))


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def dense(units: int, activation: str | None = None) -> LayerSpec:
    return LayerSpec(DENSE, units=units, activation=activation)


@dataclass
class ModelSpec:
    """A named architecture: input shape, layer list, optional backbone."""

    name: str
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] = (256, 256, 1)
    backbone: str | None = None
    pretrained: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise SpecError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if not self.layers:
            raise SpecError(f"model {self.name!r} has no layers")
        last = self.layers[-1]
        if last.kind != DENSE or last.units != 1 or last.activation != "sigmoid":
            raise SpecError(
                f"model {self.name!r} must end with a 1-unit sigmoid dense layer"
            )
        earlier = [l for l in self.layers[:-1]
                   if l.kind == DENSE and l.units == 1 and l.activation == "sigmoid"]
        if earlier:
            raise SpecError(f"model {self.name!r} has more than one output layer")
        if self.backbone is not None:
            head = self.layers
            ok = (len(head) == 2 and head[0].kind == DENSE and head[0].units == 32
                  and head[0].activation == "relu")
            if not ok:
                raise SpecError(
                    f"model {self.name!r}: a backbone model's head must be "
                    "dense-32 (relu) then dense-1 (sigmoid)"
                )
        if self.pretrained and self.backbone is None:
            raise SpecError(f"model {self.name!r}: pretrained requires a backbone")

    def to_dict(self) -> dict:
        return {
            "format_version": SPEC_FORMAT_VERSION,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "backbone": self.backbone,
            "pretrained": self.pretrained,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        version = data.get("format_version", SPEC_FORMAT_VERSION)
        if version != SPEC_FORMAT_VERSION:
            raise SpecError(f"unsupported model spec format_version {version}")
        try:
            return cls(
                name=data["name"],
                layers=[LayerSpec.from_dict(d) for d in data["layers"]],
                input_shape=tuple(data.get("input_shape", (256, 256, 1))),
                backbone=data.get("backbone"),
                pretrained=bool(data.get("pretrained", False)),
            )
        except KeyError as exc:
            raise SpecError(f"model spec missing field {exc}") from None


def spec_hash(spec: ModelSpec) -> str:
    payload = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def save_spec(spec: ModelSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def load_spec(path: str | Path) -> ModelSpec:
    with open(path) as fh:
        return ModelSpec.from_dict(json.load(fh))


# -- backbone providers -----------------------------------------------------------


class BackboneProvider:
    """Supplies a feature-extractor stack ending in a flat feature vector.

    ``build`` returns freshly constructed engine layers; when ``pretrained``
    is requested the provider must own a weight source and loads it after
    seeded construction, otherwise it raises WeightsUnavailableError - random
    initialization never silently stands in for pretrained weights. Providers
    here take single-channel input directly; a provider wrapping a 3-channel
    feature extractor must do its own input adaptation (e.g. lead with a fixed
    channel replication).
    """

    name: str = ""

    def build(self, pretrained: bool) -> list[Layer]:
        raise NotImplementedError

    def has_pretrained(self) -> bool:
        return False

    def feature_shape(self, input_shape: tuple[int, int, int]) -> tuple[int, ...]:
        return _stack_output_shape(self.build(pretrained=False), input_shape)

    def param_count(self) -> int:
        stack = self.build(pretrained=False)
        return sum(int(value.size) for layer in _walk_layers(stack)
                   for _, value, _ in layer.params())


def _walk_layers(stack: list[Layer]) -> list[Layer]:
    flat: list[Layer] = []
    for layer in stack:
        kids = layer.children()
        flat.extend(_walk_layers(kids) if kids else [layer])
    return flat


def _stack_output_shape(stack: list[Layer], input_shape) -> tuple[int, ...]:
    """Static shape of a built engine-layer stack's output for one image."""
    shape = tuple(input_shape)
    for layer in stack:
        if isinstance(layer, (Conv2D, DepthwiseConv2D, MaxPool2D)):
            h, w = layer.out_hw(shape[0], shape[1])
            if h <= 0 or w <= 0:
                raise SpecError(f"{layer.name}: output collapsed to {h}x{w}")
            c = layer.filters if isinstance(layer, Conv2D) else shape[2]
            shape = (h, w, c)
        elif isinstance(layer, (BatchNorm2D, Activation)):
            pass
        elif isinstance(layer, GlobalAvgPool2D):
            shape = (shape[2],)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, ResidualBlock):
            main_shape = _stack_output_shape(layer.main, shape)
            short_shape = (_stack_output_shape(layer.shortcut, shape)
                           if layer.shortcut else shape)
            if main_shape != short_shape:
                raise SpecError(
                    f"{layer.name}: branch shapes differ: {main_shape} vs {short_shape}"
                )
            shape = main_shape
        elif isinstance(layer, Dense):
            shape = (layer.units,)
        else:
            raise SpecError(f"cannot infer shape through layer {type(layer).__name__}")
    return shape


class ToyBackboneProvider(BackboneProvider):
    """Desk-scale stand-in for a named feature extractor archetype.

    The stack keeps the archetype's signature structure (plain conv blocks,
    residual blocks with batchnorm, or depthwise-separable blocks) at a size
    that trains in seconds on a CPU. ``pretrained_source`` names a weight
    stream learned independently of any training seed ("surrogate:<int>");
    without one, pretrained builds fail loudly.
    """

    def __init__(self, name: str, stack_fn, pretrained_source: str | None = None):
        self.name = name
        self._stack_fn = stack_fn
        self.pretrained_source = pretrained_source

    def has_pretrained(self) -> bool:
        return self.pretrained_source is not None

    def build(self, pretrained: bool) -> list[Layer]:
        stack = self._stack_fn()
        if not pretrained:
            return stack
        if self.pretrained_source is None:
            raise WeightsUnavailableError(
                f"backbone {self.name!r} has no pretrained weight source registered; "
                "re-register it with pretrained_source='surrogate:<seed>' or train "
                "from random initialization"
            )
        base = _source_seed(self.name, self.pretrained_source)
        for index, layer in enumerate(_walk_layers(stack)):
            layer.init_params(np.random.default_rng([base, index]))
        return stack


def _source_seed(name: str, source: str) -> int:
    digest = hashlib.sha256(f"{name}:{source}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _toy_vgg16_stack() -> list[Layer]:
    return [
        Conv2D(1, 8, padding="same", activation="relu", name="b1c1"),
        MaxPool2D(2, name="b1p"),
        Conv2D(8, 16, padding="same", activation="relu", name="b2c1"),
        MaxPool2D(2, name="b2p"),
        Conv2D(16, 16, padding="same", activation="relu", name="b3c1"),
        MaxPool2D(2, name="b3p"),
        Flatten(name="bflat"),
    ]


def _bn_conv(cin, cout, kernel=(3, 3), name="c") -> list[Layer]:
    return [
        Conv2D(cin, cout, kernel=kernel, padding="same", use_bias=False, name=name),
        BatchNorm2D(cout, name=f"{name}bn"),
    ]


def _toy_resnet50_stack() -> list[Layer]:
    return [
        *_bn_conv(1, 8, name="stem"),
        Activation(name="stemrelu"),
        MaxPool2D(2, name="p1"),
        MaxPool2D(2, name="p2"),
        ResidualBlock(
            main=[*_bn_conv(8, 8, name="r1a"), Activation(name="r1relu"),
                  *_bn_conv(8, 8, name="r1b")],
            name="res1",
        ),
        MaxPool2D(2, name="p3"),
        ResidualBlock(
            main=[*_bn_conv(8, 16, name="r2a"), Activation(name="r2relu"),
                  *_bn_conv(16, 16, name="r2b")],
            shortcut=_bn_conv(8, 16, kernel=(1, 1), name="r2s"),
            name="res2",
        ),
        GlobalAvgPool2D(name="gap"),
    ]


def _toy_mobilenet_stack() -> list[Layer]:
    return [
        *_bn_conv(1, 8, name="stem"),
        Activation(name="stemrelu"),
        MaxPool2D(2, name="p1"),
        MaxPool2D(2, name="p2"),
        DepthwiseConv2D(8, padding="same", use_bias=False, name="dw1"),
        BatchNorm2D(8, name="dw1bn"),
        Activation(name="dw1relu"),
        *_bn_conv(8, 16, kernel=(1, 1), name="pw1"),
        Activation(name="pw1relu"),
        MaxPool2D(2, name="p3"),
        DepthwiseConv2D(16, stride=(2, 2), padding="same", use_bias=False, name="dw2"),
        BatchNorm2D(16, name="dw2bn"),
        Activation(name="dw2relu"),
        *_bn_conv(16, 32, kernel=(1, 1), name="pw2"),
        Activation(name="pw2relu"),
        GlobalAvgPool2D(name="gap"),
    ]


_TOY_STACKS = {
    "vgg16": _toy_vgg16_stack,
    "resnet50": _toy_resnet50_stack,
    "mobilenet": _toy_mobilenet_stack,
}


def toy_backbone(name: str, pretrained_source: str | None = None) -> ToyBackboneProvider:
    if name not in _TOY_STACKS:
        raise ConfigError(f"no toy backbone named {name!r}")
    return ToyBackboneProvider(name, _TOY_STACKS[name], pretrained_source)


_REGISTRY: dict[str, BackboneProvider] = {}


def register_backbone(provider: BackboneProvider, replace: bool = False) -> None:
    if not replace and provider.name in _REGISTRY:
        raise ConfigError(f"backbone {provider.name!r} already registered")
    _REGISTRY[provider.name] = provider


def get_backbone(name: str) -> BackboneProvider:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown backbone {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_backbones() -> list[str]:
    return sorted(_REGISTRY)


for _name in _TOY_STACKS:
    register_backbone(toy_backbone(_name))


# -- spec builders ----------------------------------------------------------------

BASELINE_NAME = "Simple model"

_TRANSFER_NAMES = {"vgg16": "MVGG16", "resnet50": "MResNet50", "mobilenet": "MMobileNet"}


def build_baseline() -> ModelSpec:
    """Two valid 3x3 conv layers, one 2x2 pool, and a 32-unit dense head."""
    return ModelSpec(
        name=BASELINE_NAME,
        layers=[
            conv2d(32),
            conv2d(64),
            maxpool2d(),
            flatten(),
            dense(32, activation="relu"),
            dense(1, activation="sigmoid"),
        ],
    )


def build_transfer(backbone: str, pretrained: bool) -> ModelSpec:
    """A named backbone with the stock wide head replaced by dense-32/dense-1."""
    backbone = backbone.lower()
    if backbone not in _TRANSFER_NAMES:
        raise ConfigError(
            f"unknown backbone {backbone!r}; expected one of {sorted(_TRANSFER_NAMES)}"
        )
    name = _TRANSFER_NAMES[backbone] + ("+ImageNet" if pretrained else "")
    return ModelSpec(
        name=name,
        layers=[dense(32, activation="relu"), dense(1, activation="sigmoid")],
        backbone=backbone,
        pretrained=pretrained,
    )


def build_model_spec(model: str, pretrained: bool = False) -> ModelSpec:
    """Name -> spec dispatch used by the command line: baseline or a backbone."""
    if model.lower() in ("baseline", "simple"):
        if pretrained:
            raise ConfigError("the baseline model has no pretrained variant")
        return build_baseline()
    return build_transfer(model, pretrained)


# -- shape inference and parameter accounting ---------------------------------------


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape after each spec layer (backbone collapsed into the input)."""
    if spec.backbone is not None:
        shape = get_backbone(spec.backbone).feature_shape(spec.input_shape)
    else:
        shape = spec.input_shape
    shapes = []
    for layer in spec.layers:
        shape = _layer_output_shape(layer, shape)
        shapes.append(shape)
    return shapes


def _layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind in (CONV2D, MAXPOOL2D) and len(shape) != 3:
        raise SpecError(f"{layer.kind} needs a (H, W, C) input, got {shape}")
    if layer.kind == CONV2D:
        h, w, _ = shape
        kh, kw = layer.kernel
        sy, sx = layer.stride or (1, 1)
        if layer.padding == "same":
            oh, ow = -(-h // sy), -(-w // sx)
        else:
            if h < kh or w < kw:
                raise SpecError(f"conv2d kernel {layer.kernel} exceeds input {h}x{w}")
            oh, ow = (h - kh) // sy + 1, (w - kw) // sx + 1
        return (oh, ow, layer.filters)
    if layer.kind == MAXPOOL2D:
        h, w, c = shape
        ph, pw = layer.kernel
        sy, sx = layer.stride or layer.kernel
        if (h - ph) % sy or (w - pw) % sx:
            raise SpecError(
                f"maxpool2d window {layer.kernel} stride {(sy, sx)} does not tile "
                f"{h}x{w} evenly"
            )
        return ((h - ph) // sy + 1, (w - pw) // sx + 1, c)
    if layer.kind == FLATTEN:
        return (int(np.prod(shape)),)
    if layer.kind == DENSE:
        if len(shape) != 1:
            raise SpecError(f"dense needs a flat input, got {shape}")
        return (layer.units,)
    raise SpecError(f"unknown layer kind {layer.kind!r}")


@dataclass(frozen=True)
class ParamCounts:
    """Trainable parameter counts: one entry per spec layer plus the backbone."""

    per_layer: list[int]
    backbone: int
    total: int


def param_count(spec: ModelSpec) -> ParamCounts:
    """conv: kh*kw*cin*filters + filters; dense: in*units + units; else 0."""
    if spec.backbone is not None:
        provider = get_backbone(spec.backbone)
        shape = provider.feature_shape(spec.input_shape)
        backbone_params = provider.param_count()
    else:
        shape = spec.input_shape
        backbone_params = 0
    per_layer = []
    for layer in spec.layers:
        if layer.kind == CONV2D:
            kh, kw = layer.kernel
            per_layer.append(kh * kw * shape[2] * layer.filters + layer.filters)
        elif layer.kind == DENSE:
            if len(shape) != 1:
                raise SpecError(f"dense needs a flat input, got {shape}")
            per_layer.append(shape[0] * layer.units + layer.units)
        else:
            per_layer.append(0)
        shape = _layer_output_shape(layer, shape)
    return ParamCounts(
        per_layer=per_layer, backbone=backbone_params,
        total=backbone_params + sum(per_layer),
    )


# -- instantiation ------------------------------------------------------------------


def _fusable_pool(layer: LayerSpec, nxt: LayerSpec | None, shape) -> bool:
    """conv+pool collapse into the fused kernel only when the conv output
    tiles exactly into the 4x4 output blocks (both dims divisible by 4)."""
    if nxt is None or layer.kind != CONV2D or nxt.kind != MAXPOOL2D:
        return False
    if layer.kernel != (3, 3) or (layer.stride or (1, 1)) != (1, 1):
        return False
    if layer.activation != "relu" or nxt.kernel != (2, 2):
        return False
    if (nxt.stride or nxt.kernel) != (2, 2):
        return False
    oh, ow, _ = _layer_output_shape(layer, shape)
    return oh % 4 == 0 and ow % 4 == 0


def instantiate(spec: ModelSpec, seed: int,
                require_pretrained_weights: bool = True) -> Network:
    """Build the runnable network for a spec with seeded initialization.

    Pretrained backbones keep their provider-supplied weights; every other
    parameter is drawn from streams keyed by (seed, layer index), so two
    instantiations with the same arguments are bit-identical.
    ``require_pretrained_weights=False`` builds a pretrained spec's topology
    with seed initialization only - used when a checkpoint is about to
    overwrite every parameter anyway.
    """
    layers: list[Layer] = []
    if spec.backbone is not None:
        provider = get_backbone(spec.backbone)
        pretrained = spec.pretrained and require_pretrained_weights
        backbone_layers = provider.build(pretrained=pretrained)
        layers.extend(backbone_layers)
        shape = _stack_output_shape(backbone_layers, spec.input_shape)
    else:
        shape = spec.input_shape
    specs = spec.layers
    i = 0
    while i < len(specs):
        layer = specs[i]
        nxt = specs[i + 1] if i + 1 < len(specs) else None
        if layer.kind == CONV2D:
            fuse = _fusable_pool(layer, nxt, shape)
            layers.append(Conv2D(
                in_channels=shape[2], filters=layer.filters, kernel=layer.kernel,
                stride=layer.stride or (1, 1), padding=layer.padding,
                activation=layer.activation, fuse_pool=fuse, name=f"conv{i}",
            ))
            if fuse:
                shape = _layer_output_shape(nxt, _layer_output_shape(layer, shape))
                i += 2
                continue
        elif layer.kind == MAXPOOL2D:
            ph, pw = layer.kernel
            sy, sx = layer.stride or layer.kernel
            if ph != pw or sy != sx:
                raise SpecError(f"maxpool2d window and stride must be square, got {layer}")
            layers.append(MaxPool2D(ph, stride=sy, name=f"pool{i}"))
        elif layer.kind == FLATTEN:
            layers.append(Flatten(name=f"flatten{i}"))
        elif layer.kind == DENSE:
            is_output = i == len(specs) - 1
            layers.append(Dense(
                in_features=shape[0], units=layer.units,
                activation=layer.activation if not is_output else None,
                defer_wgrad=shape[0] >= _DEFER_WGRAD_MIN, name=f"dense{i}",
            ))
        shape = _layer_output_shape(layer, shape)
        i += 1

    network = Network(layers)
    pretrained_state = None
    if spec.backbone is not None and spec.pretrained and require_pretrained_weights:
        pretrained_state = [
            (layer, [(name, value.copy()) for name, value, _ in layer.params()])
            for layer in _walk_layers(backbone_layers)
        ]
    network.init_params(seed)
    if pretrained_state is not None:
        for layer, saved in pretrained_state:
            for (name, value), (_, current, _) in zip(saved, layer.params()):
                current[...] = value
    return network


def predict(network: Network, images: np.ndarray,
            input_shape: tuple[int, int, int] = (256, 256, 1)) -> np.ndarray:
    """Probabilities of the pathological class, one per image, order-preserving."""
    images = np.asarray(images, dtype=np.float32)
    h, w, c = input_shape
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4 or images.shape[1:] != (h, w, c):
        raise InputError(
            f"expected images shaped (n, {h}, {w}, {c}) or (n, {h}, {w}), "
            f"got {images.shape}"
        )
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise InputError("image values must lie in [0, 1]")
    return network.predict_proba(images)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path: str | Path, network: Network, spec: ModelSpec,
                    meta: dict | None = None) -> None:
    """All weights and buffers plus the spec and its hash, in one npz file."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "spec_hash": spec_hash(spec),
        "meta": meta or {},
    }
    header_bytes = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    arrays = network.state_arrays()
    np.savez(path, __header__=header_bytes, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Network, ModelSpec, dict]:
    """Rebuild the network from a checkpoint; verifies the embedded spec hash."""
    try:
        with np.load(path) as data:
            arrays = {name: data[name] for name in data.files}
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read checkpoint {path}: {exc}") from None
    if "__header__" not in arrays:
        raise IngestError(f"checkpoint {path} has no header")
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IngestError(
            f"checkpoint {path}: unsupported format_version {header.get('format_version')}"
        )
    spec = ModelSpec.from_dict(header["spec"])
    if spec_hash(spec) != header.get("spec_hash"):
        raise IngestError(f"checkpoint {path}: spec hash mismatch")
    network = instantiate(spec, seed=0, require_pretrained_weights=False)
    try:
        network.load_state_arrays(arrays)
    except ValueError as exc:
        raise IngestError(f"checkpoint {path}: {exc}") from None
    return network, spec, header.get("meta", {})
