"""Compound-scaled MBConv backbone with the two-layer classifier head.

An :class:`ArchSpec` is a declarative stage table. :func:`scale_arch`
applies depth/width/resolution multipliers to it, :func:`build_model`
allocates parameters, and :func:`forward` / :func:`backward` run the
network on numpy arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from ecovnet import ops
from ecovnet.errors import ArgumentError, DimensionError, NumericalError

log = logging.getLogger(__name__)

OPERATORS = ("conv", "mbconv1", "mbconv6")


@dataclass(frozen=True)
class ScalingCoefficients:
    alpha: float = 1.2   # depth base
    beta: float = 1.1    # width base
    gamma: float = 1.15  # resolution base
    phi: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1:
            raise ArgumentError("alpha, beta and gamma must all be >= 1")
        if self.phi < 0:
            raise ArgumentError(f"phi must be >= 0, got {self.phi}")
        if abs(self.constraint_product - 2.0) > 0.2:
            log.warning("alpha*beta^2*gamma^2 = %.4f is more than 10%% away from 2", self.constraint_product)

    @property
    def constraint_product(self) -> float:
        return self.alpha * self.beta ** 2 * self.gamma ** 2

    @property
    def depth(self) -> float:
        return self.alpha ** self.phi

    @property
    def width(self) -> float:
        return self.beta ** self.phi

    @property
    def resolution(self) -> float:
        return self.gamma ** self.phi


@dataclass(frozen=True)
class Stage:
    op: str
    kernel: int
    stride: int
    channels: int
    repeats: int = 1
    se_ratio: int = 0
    skip: bool = True

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ArgumentError(f"unknown operator {self.op!r}")
        if self.kernel < 1 or self.stride < 1 or self.channels < 1 or self.repeats < 1:
            raise ArgumentError(f"invalid stage {self}")

    @property
    def expand_ratio(self) -> int:
        return 6 if self.op == "mbconv6" else 1

    @property
    def label(self) -> str:
        if self.op == "conv":
            return f"Conv {self.kernel}x{self.kernel}"
        return f"MBConv{self.expand_ratio}, k{self.kernel}x{self.kernel}"


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple[Stage, ...]
    resolution: int = 224
    num_classes: int = 3
    head_units: int = 512
    head_dropout: float = 0.3
    residual_dropout: float = 0.2
    name: str = "custom"

    @property
    def downsampling(self) -> int:
        return math.prod(s.stride for s in self.stages)

    def stage_rows(self) -> list[dict]:
        """One dict per stage with its input resolution, as in the layer outline table."""
        rows, res = [], self.resolution
        for i, s in enumerate(self.stages, 1):
            op = s.label
            if i == len(self.stages) and s.op == "conv":
                op += " & Pooling & FC"
            rows.append(dict(stage=i, operator=op, resolution=res, channels=s.channels,
                             layers=s.repeats, stride=s.stride, se_ratio=s.se_ratio))
            res = ops.output_extent(res, s.kernel, s.stride, "same")
        return rows

    def format_table(self) -> str:
        lines = [f"# {self.name}: resolution {self.resolution}x{self.resolution}, "
                 f"{self.num_classes} classes, head {self.head_units}",
                 f"{'stage':>5}  {'operator':<28}{'resolution':>12}{'channels':>10}{'layers':>8}"]
        for r in self.stage_rows():
            res = f"{r['resolution']}x{r['resolution']}"
            lines.append(f"{r['stage']:>5}  {r['operator']:<28}{res:>12}{r['channels']:>10}{r['layers']:>8}")
        return "\n".join(lines)


B0_STAGES = (
    Stage("conv", 3, 2, 32),
    Stage("mbconv1", 3, 1, 16, 1, se_ratio=4),
    Stage("mbconv6", 3, 2, 24, 2, se_ratio=24),
    Stage("mbconv6", 5, 2, 40, 2, se_ratio=24),
    Stage("mbconv6", 3, 2, 80, 3, se_ratio=24),
    Stage("mbconv6", 5, 1, 112, 3, se_ratio=24),
    Stage("mbconv6", 5, 2, 192, 4, se_ratio=24),
    Stage("mbconv6", 3, 1, 320, 1, se_ratio=24),
    Stage("conv", 1, 1, 1280),
)

PRESET_RESOLUTIONS = {"b0": 224, "b1": 240, "b2": 260, "b3": 360, "b4": 380, "b5": 456}


def b0_arch(num_classes: int = 3) -> ArchSpec:
    return ArchSpec(B0_STAGES, resolution=224, num_classes=num_classes, name="b0")


def micro_arch(resolution: int = 48, num_classes: int = 3) -> ArchSpec:
    """Small backbone for desk-scale runs: overall stride 8, so a 6x6 top map at 48 px."""
    stages = (
        Stage("conv", 3, 2, 24),
        Stage("mbconv1", 3, 1, 16, 1, se_ratio=4),
        Stage("mbconv6", 3, 2, 24, 1, se_ratio=24),
        Stage("mbconv6", 5, 2, 40, 2, se_ratio=24),
        Stage("conv", 1, 1, 128),
    )
    return ArchSpec(stages, resolution=resolution, num_classes=num_classes, head_units=256, name="micro")


def round_channels(channels: float, divisor: int = 8) -> int:
    out = max(divisor, int(channels + divisor / 2) // divisor * divisor)
    if out < 0.9 * channels:
        out += divisor
    return int(out)


def scale_arch(base: ArchSpec, coeffs: ScalingCoefficients) -> ArchSpec:
    if coeffs.phi < 0:
        raise ArgumentError("phi must be >= 0")
    if coeffs.phi == 0:
        return base
    d, w = coeffs.depth, coeffs.width
    stages = []
    for s in base.stages:
        # stem and top convolutions are never repeated
        repeats = s.repeats if s.op == "conv" else int(math.ceil(s.repeats * d))
        stages.append(replace(s, channels=round_channels(s.channels * w), repeats=repeats))
    return replace(base, stages=tuple(stages), resolution=int(round(base.resolution * coeffs.resolution)),
                   name=f"{base.name}@phi={coeffs.phi:g}")


def preset_arch(name: str, num_classes: int = 3) -> ArchSpec:
    key = name.lower()
    if key not in PRESET_RESOLUTIONS:
        raise ArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESET_RESOLUTIONS)}")
    phi = int(key[1:])
    spec = scale_arch(b0_arch(num_classes), ScalingCoefficients(phi=phi))
    return replace(spec, resolution=PRESET_RESOLUTIONS[key], name=key)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]  # BN running statistics
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.state.items()}, self.dtype)

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable parameters followed by running statistics, in a stable order."""
        return {**self.params, **self.state}

    def regularized_names(self) -> list[str]:
        return ["head/fc1/w", "head/fc2/w"]


def param_count(model: ModelParams | Mapping[str, np.ndarray]) -> int:
    """Number of trainable scalars; BN running statistics are not counted."""
    tensors = model.params if isinstance(model, ModelParams) else model
    return int(sum(np.asarray(v).size for v in tensors.values()))


def state_count(model: ModelParams) -> int:
    return int(sum(v.size for v in model.state.values()))


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def he(self, name, shape, fan_in):
        self._add(name, self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))

    def zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def bn(self, name, c):
        self._add(f"{name}/gamma", np.ones(c))
        self._add(f"{name}/beta", np.zeros(c))
        self.state[f"{name}/mean"] = np.zeros(c, dtype=self.dtype)
        self.state[f"{name}/var"] = np.ones(c, dtype=self.dtype)

    def _add(self, name, value):
        if name in self.params:
            raise ArgumentError(f"duplicate parameter name {name}")
        self.params[name] = np.asarray(value, dtype=self.dtype)


# ---------------------------------------------------------------------------
# network pieces
# ---------------------------------------------------------------------------

class ConvBN:
    """Convolution (dense or depthwise) -> BN -> optional swish."""

    def __init__(self, name, cin, cout, kernel, stride, depthwise=False, act=True):
        self.name, self.cin, self.cout = name, cin, cout
        self.kernel, self.stride, self.depthwise, self.act = kernel, stride, depthwise, act

    def init(self, ini: _Init):
        if self.depthwise:
            ini.he(f"{self.name}/dw", (self.cin, self.kernel, self.kernel), self.kernel ** 2)
        else:
            ini.he(f"{self.name}/conv", (self.cout, self.cin, self.kernel, self.kernel), self.cin * self.kernel ** 2)
        ini.bn(f"{self.name}/bn", self.cout)

    def forward(self, P, S, x, training):
        n = self.name
        if self.depthwise:
            h, c1 = ops.depthwise_conv2d(x, P[f"{n}/dw"], self.stride, "same")
        else:
            h, c1 = ops.conv2d(x, P[f"{n}/conv"], self.stride, "same")
        h, c2 = ops.batch_norm(h, P[f"{n}/bn/gamma"], P[f"{n}/bn/beta"], S[f"{n}/bn/mean"], S[f"{n}/bn/var"], training)
        c3 = None
        if self.act:
            h, c3 = ops.activation("swish", h)
        return h, (c1, c2, c3)

    def backward(self, P, dout, cache, G):
        c1, c2, c3 = cache
        n = self.name
        if c3 is not None:
            dout = ops.activation_backward(dout, c3)
        dh, G[f"{n}/bn/gamma"], G[f"{n}/bn/beta"] = ops.batch_norm_backward(dout, c2)
        if self.depthwise:
            dx, G[f"{n}/dw"] = ops.depthwise_conv2d_backward(dh, c1)
        else:
            dx, G[f"{n}/conv"] = ops.conv2d_backward(dh, c1)
        return dx


class MBConv:
    def __init__(self, name, cin, cout, kernel, stride, expand, se_ratio, skip_allowed, drop_rate):
        self.name = name
        self.cin, self.cout = cin, cout
        mid = cin * expand
        self.expand = ConvBN(f"{name}/expand", cin, mid, 1, 1) if expand != 1 else None
        self.dw = ConvBN(f"{name}/dw", mid, mid, kernel, stride, depthwise=True)
        self.se_units = ops.squeeze_units(mid, se_ratio) if se_ratio else 0
        self.mid = mid
        self.project = ConvBN(f"{name}/project", mid, cout, 1, 1, act=False)
        self.skip = skip_allowed and stride == 1 and cin == cout
        self.drop_rate = drop_rate

    def init(self, ini: _Init):
        if self.expand:
            self.expand.init(ini)
        self.dw.init(ini)
        if self.se_units:
            n = f"{self.name}/se"
            ini.he(f"{n}/reduce/w", (self.mid, self.se_units), self.mid)
            ini.zeros(f"{n}/reduce/b", (self.se_units,))
            ini.he(f"{n}/expand/w", (self.se_units, self.mid), self.se_units)
            ini.zeros(f"{n}/expand/b", (self.mid,))
        self.project.init(ini)

    def forward(self, P, S, x, training, rng):
        h, ce = self.expand.forward(P, S, x, training) if self.expand else (x, None)
        h, cd = self.dw.forward(P, S, h, training)
        cs = None
        if self.se_units:
            n = f"{self.name}/se"
            h, cs = ops.squeeze_excite(h, P[f"{n}/reduce/w"], P[f"{n}/reduce/b"],
                                       P[f"{n}/expand/w"], P[f"{n}/expand/b"])
        h, cp = self.project.forward(P, S, h, training)
        mask = None
        if self.skip:
            # whole-sample drop of the residual branch
            h, mask = ops.dropout(h, self.drop_rate, training, rng, mask_shape=(h.shape[0], 1, 1, 1))
            h = h + x
        return h, (ce, cd, cs, cp, mask)

    def backward(self, P, dout, cache, G):
        ce, cd, cs, cp, mask = cache
        dbranch = ops.dropout_backward(dout, mask) if self.skip else dout
        dh = self.project.backward(P, dbranch, cp, G)
        if cs is not None:
            n = f"{self.name}/se"
            dh, G[f"{n}/reduce/w"], G[f"{n}/reduce/b"], G[f"{n}/expand/w"], G[f"{n}/expand/b"] = (
                ops.squeeze_excite_backward(dh, cs))
        dh = self.dw.backward(P, dh, cd, G)
        if self.expand:
            dh = self.expand.backward(P, dh, ce, G)
        if self.skip:
            dh = dh + dout
        return dh


class Head:
    """GAP -> (FC -> BN -> swish -> dropout) x 2 -> FC(C)."""

    def __init__(self, cin, units, num_classes, dropout):
        self.cin, self.units, self.num_classes, self.p = cin, units, num_classes, dropout

    def init(self, ini: _Init):
        ini.he("head/fc1/w", (self.cin, self.units), self.cin)
        ini.zeros("head/fc1/b", (self.units,))
        ini.bn("head/bn1", self.units)
        ini.he("head/fc2/w", (self.units, self.units), self.units)
        ini.zeros("head/fc2/b", (self.units,))
        ini.bn("head/bn2", self.units)
        ini.he("head/out/w", (self.units, self.num_classes), self.units)
        ini.zeros("head/out/b", (self.num_classes,))

    def forward(self, P, S, x, training, rng):
        h, cp = ops.global_avg_pool(x)
        caches = [cp]
        for i in (1, 2):
            h, c1 = ops.fully_connected(h, P[f"head/fc{i}/w"], P[f"head/fc{i}/b"])
            h, c2 = ops.batch_norm(h, P[f"head/bn{i}/gamma"], P[f"head/bn{i}/beta"],
                                   S[f"head/bn{i}/mean"], S[f"head/bn{i}/var"], training)
            h, c3 = ops.activation("swish", h)
            h, mask = ops.dropout(h, self.p, training, rng)
            caches.append((c1, c2, c3, mask))
        logits, co = ops.fully_connected(h, P["head/out/w"], P["head/out/b"])
        caches.append(co)
        return logits, caches

    def backward(self, P, dlogits, caches, G):
        dh, G["head/out/w"], G["head/out/b"] = ops.fully_connected_backward(dlogits, caches[-1])
        for i in (2, 1):
            c1, c2, c3, mask = caches[i]
            dh = ops.dropout_backward(dh, mask)
            dh = ops.activation_backward(dh, c3)
            dh, G[f"head/bn{i}/gamma"], G[f"head/bn{i}/beta"] = ops.batch_norm_backward(dh, c2)
            dh, G[f"head/fc{i}/w"], G[f"head/fc{i}/b"] = ops.fully_connected_backward(dh, c1)
        return ops.global_avg_pool_backward(dh, caches[0])


def _blocks(arch: ArchSpec) -> Iterator[tuple[str, object]]:
    """Yield (activation name, block) pairs in execution order."""
    cin = 3
    conv_seen = 0
    n_conv = sum(s.op == "conv" for s in arch.stages)
    for si, s in enumerate(arch.stages, 1):
        if s.op == "conv":
            conv_seen += 1
            name = "stem" if conv_seen == 1 else ("top" if conv_seen == n_conv else f"conv{si}")
            yield name, ConvBN(name, cin, s.channels, s.kernel, s.stride)
            cin = s.channels
            continue
        for r in range(s.repeats):
            name = f"block{si}{chr(ord('a') + r)}"
            stride = s.stride if r == 0 else 1
            yield name, MBConv(name, cin, s.channels, s.kernel, stride, s.expand_ratio,
                               s.se_ratio, s.skip, arch.residual_dropout)
            cin = s.channels
    yield "head", Head(cin, arch.head_units, arch.num_classes, arch.head_dropout)


def layers(arch: ArchSpec) -> list[tuple[str, object]]:
    return list(_blocks(arch))


def build_model(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    if spec.resolution < spec.downsampling:
        raise ArgumentError(f"resolution {spec.resolution} is smaller than the total "
                            f"downsampling factor {spec.downsampling}")
    ini = _Init(seed, np.dtype(dtype))
    for _, block in _blocks(spec):
        block.init(ini)
    return ModelParams(spec, ini.params, ini.state, np.dtype(dtype))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    activations: dict[str, np.ndarray]
    tape: list


def forward(model: ModelParams, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Run the network. Block outputs are kept in ``activations`` by name."""
    arch = model.arch
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise DimensionError(f"expected (N, 3, H, W) input, got {batch.shape}")
    if batch.shape[2:] != (arch.resolution, arch.resolution):
        raise DimensionError(f"input is {batch.shape[2]}x{batch.shape[3]}, "
                             f"model expects {arch.resolution}x{arch.resolution}")
    if training and rng is None:
        raise ArgumentError("training-mode forward needs an rng for dropout")
    P, S = model.params, model.state
    h = batch.astype(model.dtype, copy=False)
    acts, tape = {}, []
    for name, block in layers(arch):
        if isinstance(block, ConvBN):
            h, cache = block.forward(P, S, h, training)
        else:
            h, cache = block.forward(P, S, h, training, rng)
        tape.append((name, block, cache))
        if name != "head":
            acts[name] = h
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite logits in forward pass")
    return ForwardResult(h, ops.softmax(h), acts, tape)


def backward(model: ModelParams, result: ForwardResult, dlogits: np.ndarray,
             capture: str | None = None):
    """Backpropagate ``dlogits``.

    Returns the gradient dict. With ``capture`` set, stops once the
    gradient with respect to that activation is known and returns it
    instead.
    """
    G: dict[str, np.ndarray] = {}
    d = dlogits
    for i in range(len(result.tape) - 1, -1, -1):
        name, block, cache = result.tape[i]
        if capture is not None and name == capture:
            return d
        d = block.backward(model.params, d, cache, G)
    if capture is not None:
        raise ArgumentError(f"no activation named {capture!r}")
    return G
