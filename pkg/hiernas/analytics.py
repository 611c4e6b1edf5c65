# hiernas/analytics.py
"""
Static cost accounting for decoded architectures.

Counting convention: convolution k*k*(C_in/groups)*C_out weights plus C_out
bias when present, batch norm 2*C, everything else free. Multiply-adds of a
convolution are its weight count (without bias) times the output area;
pooling, resizing, identity and additions count zero; dilation changes
nothing.
"""

from dataclasses import dataclass, field
from functools import singledispatch
from typing import List, Optional, Sequence, Tuple

from loguru import logger

from hiernas.common import InvalidArgumentError, OperatorKind, ValidationError
from hiernas.microtensor import ParamStore
from hiernas.network import DEEP_STEM_FILTERS, DEEP_STEM_STRIDES, aspp_rates, node_channels
from hiernas.search_space import CellGenotype, NetworkPath, build_trellis, check_path

LOW_LEVEL_CHANNELS = 48
DECODER_CHANNELS = 256


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | bn | pool | upsample | identity | add | concat
    stage: str  # stem | body | head | decoder
    c_in: int
    c_out: int
    out_h: int
    out_w: int
    kernel: int = 1
    groups: int = 1
    stride: int = 1
    dilation: int = 1
    bias: bool = False

    @property
    def params(self) -> int:
        if self.kind == "conv":
            return self.kernel**2 * (self.c_in // self.groups) * self.c_out + (self.c_out if self.bias else 0)
        if self.kind == "bn":
            return 2 * self.c_out
        return 0

    @property
    def multiply_adds(self) -> int:
        if self.kind != "conv":
            return 0
        return self.kernel**2 * (self.c_in // self.groups) * self.c_out * self.out_h * self.out_w


@dataclass(frozen=True)
class FinalModelPlan:
    """
    Deep stem (64, 64, 128 filters; strides 2, 1, 2), the cell repeated along
    the path at B*F*s/4 channels, an ASPP head at the final factor upsampled
    to the input, optionally a low-level-feature decoder.
    """

    cell: CellGenotype
    path: NetworkPath
    filter_multiplier: int
    num_classes: int
    in_channels: int = 3
    aspp_branches: int = 3
    low_level_decoder: bool = False
    stem_filters: Tuple[int, ...] = DEEP_STEM_FILTERS
    stem_strides: Tuple[int, ...] = DEEP_STEM_STRIDES

    @property
    def num_blocks(self) -> int:
        return self.cell.num_blocks

    @property
    def head_upsample_ratio(self) -> int:
        return 4 if self.low_level_decoder else self.path[-1]

    def channels(self, s: int) -> int:
        return node_channels(self.num_blocks, self.filter_multiplier, s)

    def layer_specs(self, height: int, width: int) -> List[LayerSpec]:
        if height % 32 or width % 32 or height <= 0 or width <= 0:
            raise InvalidArgumentError(f"input size {height}x{width} is not divisible by 32")
        return _PlanWalker(self, height, width).walk()


class _PlanWalker:
    """Emits LayerSpec rows in the same order the discrete network runs them."""

    def __init__(self, plan: FinalModelPlan, height: int, width: int):
        self.plan = plan
        self.h, self.w = height, width
        self.rows: List[LayerSpec] = []

    def size(self, s: int) -> Tuple[int, int]:
        return self.h // s, self.w // s

    def conv(self, name, stage, c_in, c_out, s, k=1, groups=1, stride=1, dilation=1, bias=False):
        self.rows.append(LayerSpec(name, "conv", stage, c_in, c_out, *self.size(s), k, groups, stride, dilation, bias))

    def bn(self, name, stage, c, s):
        self.rows.append(LayerSpec(name, "bn", stage, c, c, *self.size(s)))

    def free(self, name, kind, stage, c_in, c_out, s):
        self.rows.append(LayerSpec(name, kind, stage, c_in, c_out, *self.size(s)))

    def connector(self, name, stage, c_in, c_out, src, dst):
        if dst == 2 * src:
            self.conv(name, stage, c_in, c_out, dst, k=3, stride=2)
        else:
            self.free(f"{name}.resize", "upsample", stage, c_in, c_in, dst)
            self.conv(name, stage, c_in, c_out, dst)
        self.bn(f"{name}.bn", stage, c_out, dst)

    def operator(self, op: OperatorKind, name: str, c: int, s: int):
        if op.is_conv:
            self.conv(f"{name}.dw", "body", c, c, s, k=op.kernel_size, groups=c, dilation=op.dilation)
            self.conv(f"{name}.pw", "body", c, c, s)
            self.bn(f"{name}.bn", "body", c, s)
        elif op in (OperatorKind.AVG_POOL_3X3, OperatorKind.MAX_POOL_3X3):
            self.free(name, "pool", "body", c, c, s)
        else:
            self.free(name, "identity", "body", c, c, s)

    def cell(self, layer: int, s: int, c_prev: int, c_pprev: int):
        c = self.plan.filter_multiplier * s // 4
        prefix = f"cell{layer}.{s}"
        for i, c_in in ((0, c_pprev), (1, c_prev)):
            self.conv(f"{prefix}.pre{i}", "body", c_in, c, s)
            self.bn(f"{prefix}.pre{i}.bn", "body", c, s)
        for i, block in enumerate(self.plan.cell.blocks):
            self.operator(block.op1, f"{prefix}.b{i}.in{block.input1}.{block.op1.value}", c, s)
            self.operator(block.op2, f"{prefix}.b{i}.in{block.input2}.{block.op2.value}", c, s)
            self.free(f"{prefix}.b{i}.add", "add", "body", c, c, s)
        self.free(f"{prefix}.concat", "concat", "body", c, self.plan.channels(s), s)

    def stem(self) -> int:
        c_in, factor = self.plan.in_channels, 1
        for i, (c, stride) in enumerate(zip(self.plan.stem_filters, self.plan.stem_strides)):
            factor *= stride
            self.conv(f"stem{i}", "stem", c_in, c, factor, k=3, stride=stride)
            self.bn(f"stem{i}.bn", "stem", c, factor)
            c_in = c
        return c_in

    def aspp(self, s: int, c_in: int, c_out: int) -> None:
        plan, c = self.plan, self.plan.channels(s)
        name = f"head.{s}"
        self.conv(f"{name}.b0", "head", c_in, c, s)
        self.bn(f"{name}.b0.bn", "head", c, s)
        rates = aspp_rates(s, plan.aspp_branches)
        for i, rate in enumerate(rates, start=1):
            self.conv(f"{name}.b{i}", "head", c_in, c, s, k=3, dilation=rate)
            self.bn(f"{name}.b{i}.bn", "head", c, s)
        self.free(f"{name}.gap", "pool", "head", c_in, c_in, self.h)
        self.conv(f"{name}.pool", "head", c_in, c, self.h, bias=True)
        self.free(f"{name}.pool.resize", "upsample", "head", c, c, s)
        self.conv(f"{name}.cls", "head", c * (len(rates) + 2), c_out, s, bias=True)

    def walk(self) -> List[LayerSpec]:
        plan = self.plan
        c_stem = self.stem()
        history = [(4, c_stem)]
        for layer, s in enumerate(plan.path, start=1):
            prev_s, c_prev = history[-1]
            if prev_s != s:
                self.connector(f"conn{layer}.{prev_s}to{s}", "body", c_prev, plan.channels(s), prev_s, s)
            pp_s, c_pp = history[-2] if layer >= 2 else history[0]
            while pp_s != s:
                nxt = pp_s * 2 if s > pp_s else pp_s // 2
                self.connector(f"chain{layer}.{pp_s}to{nxt}", "body", c_pp, plan.channels(nxt), pp_s, nxt)
                pp_s, c_pp = nxt, plan.channels(nxt)
            self.cell(layer, s, plan.channels(s), c_pp)
            history.append((s, plan.channels(s)))

        last = plan.path[-1]
        if not plan.low_level_decoder:
            self.aspp(last, plan.channels(last), plan.num_classes)
            self.free("head.resize", "upsample", "head", plan.num_classes, plan.num_classes, 1)
            return self.rows

        c = plan.channels(last)
        self.aspp(last, c, c)
        self.bn(f"head.{last}.cls.bn", "head", c, last)
        self.free("decoder.resize", "upsample", "decoder", c, c, 4)
        self.conv("decoder.low", "decoder", c_stem, LOW_LEVEL_CHANNELS, 4)
        self.bn("decoder.low.bn", "decoder", LOW_LEVEL_CHANNELS, 4)
        self.free("decoder.concat", "concat", "decoder", c + LOW_LEVEL_CHANNELS, c + LOW_LEVEL_CHANNELS, 4)
        c_in = c + LOW_LEVEL_CHANNELS
        for i in range(2):
            self.conv(f"decoder.conv{i}", "decoder", c_in, DECODER_CHANNELS, 4, k=3)
            self.bn(f"decoder.conv{i}.bn", "decoder", DECODER_CHANNELS, 4)
            c_in = DECODER_CHANNELS
        self.conv("decoder.cls", "decoder", DECODER_CHANNELS, plan.num_classes, 4, bias=True)
        self.free("decoder.out", "upsample", "decoder", plan.num_classes, plan.num_classes, 1)
        return self.rows


def build_final_plan(
    cell: CellGenotype,
    path: NetworkPath,
    filter_multiplier: int,
    num_classes: int,
    aspp_branches: int = 3,
    low_level_decoder: bool = False,
) -> FinalModelPlan:
    cell.check()
    check_path(path, build_trellis(max(len(path), 1)))
    if filter_multiplier < 1 or num_classes < 1:
        raise ValidationError(f"need F >= 1 and classes >= 1, got F={filter_multiplier}, classes={num_classes}")
    if aspp_branches not in (3, 5):
        raise ValidationError(f"ASPP supports 3 or 5 branches, got {aspp_branches}")
    return FinalModelPlan(cell, path, filter_multiplier, num_classes, aspp_branches=aspp_branches, low_level_decoder=low_level_decoder)


# ---------------------------------------------------------------- counting


@singledispatch
def count_params(model) -> int:
    raise InvalidArgumentError(f"cannot count parameters of {type(model).__name__}")


@count_params.register
def _(model: FinalModelPlan) -> int:
    return sum(row.params for row in model.layer_specs(32, 32))


@count_params.register(list)
@count_params.register(tuple)
def _(model: Sequence[LayerSpec]) -> int:
    return sum(row.params for row in model)


@count_params.register
def _(model: ParamStore) -> int:
    return model.num_elements()


@singledispatch
def count_multiply_adds(model, height: Optional[int] = None, width: Optional[int] = None) -> int:
    raise InvalidArgumentError(f"cannot count multiply-adds of {type(model).__name__}")


@count_multiply_adds.register
def _(model: FinalModelPlan, height: Optional[int] = None, width: Optional[int] = None) -> int:
    if height is None or width is None:
        raise InvalidArgumentError("multiply-adds of a plan need an explicit input size")
    return sum(row.multiply_adds for row in model.layer_specs(height, width))


@count_multiply_adds.register(list)
@count_multiply_adds.register(tuple)
def _(model: Sequence[LayerSpec], height: Optional[int] = None, width: Optional[int] = None) -> int:
    return sum(row.multiply_adds for row in model)


@dataclass
class ModelStats:
    params: int
    multiply_adds: int
    input_size: Tuple[int, int]
    rows: List[LayerSpec] = field(default_factory=list)

    def by_stage(self) -> dict:
        stages: dict = {}
        for row in self.rows:
            entry = stages.setdefault(row.stage, {"params": 0, "multiply_adds": 0})
            entry["params"] += row.params
            entry["multiply_adds"] += row.multiply_adds
        return stages

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "multiply_adds": self.multiply_adds,
            "input_size": list(self.input_size),
            "stages": self.by_stage(),
            "layers": [
                {"name": r.name, "kind": r.kind, "stage": r.stage, "params": r.params, "multiply_adds": r.multiply_adds}
                for r in self.rows
            ],
        }

    def to_table(self) -> str:
        counted = [r for r in self.rows if r.params or r.multiply_adds]
        width = max([len(r.name) for r in counted] + [len("layer")])
        lines = [f"{'layer':<{width}}  {'kind':<5}  {'stage':<7}  {'params':>12}  {'multiply_adds':>16}"]
        for r in counted:
            lines.append(f"{r.name:<{width}}  {r.kind:<5}  {r.stage:<7}  {r.params:>12}  {r.multiply_adds:>16}")
        lines.append(f"{'total':<{width}}  {'':<5}  {'':<7}  {self.params:>12}  {self.multiply_adds:>16}")
        return "\n".join(lines) + "\n"


def model_stats(plan: FinalModelPlan, height: int, width: int) -> ModelStats:
    rows = plan.layer_specs(height, width)
    stats = ModelStats(
        params=sum(r.params for r in rows),
        multiply_adds=sum(r.multiply_adds for r in rows),
        input_size=(height, width),
        rows=rows,
    )
    logger.debug("Plan F={} at {}x{}: {} params, {} multiply-adds", plan.filter_multiplier, height, width, stats.params, stats.multiply_adds)
    return stats
