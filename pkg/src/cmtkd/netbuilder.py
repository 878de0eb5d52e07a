"""Teacher and student networks and the collaborative teacher forward pass."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .fusion import ImportanceFactors, fuse
from .nn import BatchNorm2d, Linear, Module, he_uniform, parameter
from .quantizers import LayerQuantizer, QuantizerSpec
from .tensor import Tensor


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture shared by every teacher and the student.

    ``layers`` uses compact tokens: ``"c32"`` is a 3x3 conv (pad 1) with 32
    output channels followed by BN and the activation quantizer, ``"M"`` /
    ``"A"`` are 2x2 max / average pools.  Convs are numbered from 1 in order;
    ``fusion_indices`` refer to those numbers.
    """

    layers: tuple[str, ...] = ("c16", "c16", "M", "c32", "c32", "M", "c64", "c64")
    fusion_indices: tuple[int, ...] = (2, 4, 6)
    num_classes: int = 10
    in_channels: int = 3
    image_size: tuple[int, int] = (16, 16)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "fusion_indices", tuple(int(k) for k in self.fusion_indices))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        self.validate()

    def parsed(self) -> list[tuple[str, int]]:
        out = []
        for tok in self.layers:
            if tok in ("M", "A"):
                out.append((tok, 2))
            elif tok.startswith("c") and tok[1:].isdigit() and int(tok[1:]) > 0:
                out.append(("c", int(tok[1:])))
            else:
                raise ValueError(f"unknown layer token {tok!r}")
        return out

    @property
    def num_convs(self) -> int:
        return sum(1 for kind, _ in self.parsed() if kind == "c")

    def feature_shapes(self) -> dict[int, tuple[int, int, int]]:
        """(C, H, W) of each conv's output, keyed by conv number."""
        c, (h, w) = self.in_channels, self.image_size
        shapes, idx = {}, 0
        for kind, arg in self.parsed():
            if kind == "c":
                idx += 1
                c = arg
                shapes[idx] = (c, h, w)
            else:
                if h % 2 or w % 2:
                    raise ValueError(f"pooling a {h}x{w} map gives a non-integral extent")
                h, w = h // 2, w // 2
        return shapes

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        shapes = self.feature_shapes()
        if not shapes:
            raise ValueError("architecture has no conv layers")
        ks = self.fusion_indices
        if not ks:
            raise ValueError("fusion_indices must not be empty")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"fusion_indices must be strictly increasing: {ks}")
        bad = [k for k in ks if k not in shapes]
        if bad:
            raise ValueError(f"fusion indices {bad} are not conv layers (have 1..{len(shapes)})")


def layer_plan(spec: NetworkSpec) -> dict[int, tuple[bool, bool]]:
    """conv number -> (quantize weights, quantize activations).

    The first conv keeps full-precision weights (it sees raw pixels) and the
    classifier is never quantized.
    """
    return {k: (k != 1, True) for k in range(1, spec.num_convs + 1)}


class Pool(Module):
    def __init__(self, kind: str, size: int):
        self.kind, self.size = kind, size

    def forward(self, x: Tensor, trace=None) -> Tensor:
        return F.max_pool2d(x, self.size) if self.kind == "M" else F.avg_pool2d(x, self.size)


class ConvUnit(Module):
    """conv3x3 -> BN -> activation quantizer (ReLU at full precision)."""

    def __init__(self, index, in_ch, out_ch, quant, rng, plan, dtype):
        self.index = index
        self.weight = parameter(he_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9), dtype)
        self.bn = BatchNorm2d(out_ch, dtype)
        qw, qa = plan
        self.wq = LayerQuantizer(QuantizerSpec(quant.scheme, quant.bits, half_wave=False), qw, dtype)
        self.aq = LayerQuantizer(QuantizerSpec(quant.scheme, quant.bits, half_wave=True), qa, dtype)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        w = self.wq(self.weight)
        y = self.bn(F.conv2d(x, w, stride=1, padding=1))
        a = self.aq(y, per_sample=True)
        if trace is not None:
            trace.append(("weight", self.index, self.weight, w, self.wq))
            trace.append(("activation", self.index, y.retain_grad(), a, self.aq))
            w.retain_grad()
            a.retain_grad()
        return a


@dataclass(frozen=True)
class QuantConfig:
    scheme: str = "hwgq"
    bits: int | None = None


class ConvNet(Module):
    """A plain feed-forward CNN; ``with_head`` adds global-average-pool + linear."""

    def __init__(
        self,
        spec: NetworkSpec,
        quant: QuantConfig,
        rng: np.random.Generator,
        with_head: bool = True,
        dtype=np.float64,
    ):
        self.spec = spec
        self.quant = quant
        plan = layer_plan(spec)
        units: list[Module] = []
        self.conv_pos: dict[int, int] = {}
        c, idx = spec.in_channels, 0
        for kind, arg in spec.parsed():
            if kind == "c":
                idx += 1
                units.append(ConvUnit(idx, c, arg, quant, rng, plan[idx], dtype))
                self.conv_pos[idx] = len(units) - 1
                c = arg
            else:
                units.append(Pool(kind, arg))
        self.units = units
        self.head = Linear(c, spec.num_classes, rng, dtype) if with_head else None

    @property
    def bits(self) -> int | None:
        return self.quant.bits

    def run(self, x: Tensor, start: int = 0, stop: int | None = None, trace=None) -> Tensor:
        """Run layers after conv ``start`` up to and including conv ``stop``."""
        first = 0 if start == 0 else self.conv_pos[start] + 1
        last = len(self.units) - 1 if stop is None else self.conv_pos[stop]
        for unit in self.units[first : last + 1]:
            x = unit(x, trace)
        return x

    def forward(self, x: Tensor, trace=None) -> tuple[dict[int, Tensor], Tensor | None]:
        """Features captured at the fusion indices and the logits (None without head)."""
        feats: dict[int, Tensor] = {}
        wanted = set(self.spec.fusion_indices)
        for unit in self.units:
            x = unit(x, trace)
            if isinstance(unit, ConvUnit) and unit.index in wanted:
                feats[unit.index] = x
        logits = self.head(F.global_avg_pool2d(x)) if self.head is not None else None
        return feats, logits


def build_network(
    spec: NetworkSpec,
    quant: QuantConfig | None,
    rng: np.random.Generator,
    with_head: bool = True,
    dtype=np.float64,
) -> ConvNet:
    return ConvNet(spec, quant or QuantConfig(), rng, with_head=with_head, dtype=dtype)


class TeacherEnsemble(Module):
    """Quantized teachers whose block outputs are fused and fed back to all of them.

    One shared full-precision classifier reads the last fused map.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        teacher_quants: list[QuantConfig],
        rng: np.random.Generator,
        dtype=np.float64,
        student_bits: int | None = None,
    ):
        if not teacher_quants:
            raise ValueError("the ensemble needs at least one teacher")
        if len(teacher_quants) < 2:
            warnings.warn("teacher ensemble with a single teacher", stacklevel=2)
        if student_bits is not None:
            for q in teacher_quants:
                if q.bits is not None and q.bits < student_bits:
                    warnings.warn(f"teacher bit-width {q.bits} below student bit-width {student_bits}", stacklevel=2)
        if spec.fusion_indices[-1] != spec.num_convs:
            raise ValueError("the last fusion index must be the last conv layer; the shared head reads that fused map")
        self.spec = spec
        self.teachers = [ConvNet(spec, q, rng, with_head=False, dtype=dtype) for q in teacher_quants]
        self.importance = ImportanceFactors(len(spec.fusion_indices), len(teacher_quants), dtype)
        last_channels = spec.feature_shapes()[spec.fusion_indices[-1]][0]
        self.head = Linear(last_channels, spec.num_classes, rng, dtype)

    def forward(self, x: Tensor, trace=None) -> tuple[dict[int, Tensor], Tensor]:
        return collaborative_forward(self, x, trace)


def collaborative_forward(
    ensemble: TeacherEnsemble, batch: Tensor, trace=None
) -> tuple[dict[int, Tensor], Tensor]:
    """Shared features {k: F_k} and combined-teacher logits z_T."""
    if not ensemble.teachers:
        raise ValueError("empty ensemble")
    inputs = [batch] * len(ensemble.teachers)
    fused: dict[int, Tensor] = {}
    prev = 0
    for j, k in enumerate(ensemble.spec.fusion_indices):
        acts = [t.run(inp, prev, k, trace) for t, inp in zip(ensemble.teachers, inputs)]
        shapes = {a.shape for a in acts}
        assert len(shapes) == 1, f"teacher outputs disagree in shape at layer {k}: {shapes}"
        fused[k] = fuse(acts, ensemble.importance.logits(j))
        inputs = [fused[k]] * len(ensemble.teachers)
        prev = k
    logits = ensemble.head(F.global_avg_pool2d(fused[prev]))
    return fused, logits


def student_forward(student: ConvNet, batch: Tensor, trace=None) -> tuple[dict[int, Tensor], Tensor]:
    return student(batch, trace)

