"""Declarative construction of the I3D / IST / SST / GSST network graphs.

A network is a DAG of typed layers.  The same graph drives both execution
(:mod:`lw3d.autodiff`) and static cost accounting (:mod:`lw3d.analysis`).
Multi-output layers (channel split) expose ports referenced as ``"id:k"``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .ops import Conv3DSpec, PoolSpec
from .tensor import Shape5

ARCHS = ("i3d", "ist", "sst", "gsst")

SHUFFLE_GROUPS = 16  # per-module shuffle group count for SST/GSST


class InceptionWidths(NamedTuple):
    b1: int
    b2_reduce: int
    b2_out: int
    b3_reduce: int
    b3_out: int
    b4_proj: int

    @property
    def out_channels(self) -> int:
        return self.b1 + self.b2_out + self.b3_out + self.b4_proj

    @property
    def capacities(self) -> tuple[int, int, int, int]:
        # branch capacity = output width of the branch's last layer
        return (self.b1, self.b2_out, self.b3_out, self.b4_proj)

    def scaled(self, mult: float) -> "InceptionWidths":
        return InceptionWidths(*(max(1, round(v * mult)) for v in self))


# Branch widths of the nine modules, in network order.
WIDTH_TABLE: dict[str, InceptionWidths] = {
    "3b": InceptionWidths(64, 96, 128, 16, 32, 32),
    "3c": InceptionWidths(128, 128, 192, 32, 96, 64),
    "4b": InceptionWidths(192, 96, 208, 16, 48, 64),
    "4c": InceptionWidths(160, 112, 224, 24, 64, 64),
    "4d": InceptionWidths(128, 128, 256, 24, 64, 64),
    "4e": InceptionWidths(112, 144, 288, 32, 64, 64),
    "4f": InceptionWidths(256, 160, 320, 32, 128, 128),
    "5b": InceptionWidths(256, 160, 320, 32, 128, 128),
    "5c": InceptionWidths(384, 192, 384, 48, 128, 128),
}

MODULE_GROUPS = {
    "mg3": ("3b", "3c"),
    "mg4": ("4b", "4c", "4d", "4e", "4f"),
    "mg5": ("5b", "5c"),
}


@dataclass(frozen=True)
class SplitSpec:
    sizes: tuple[int, ...]


@dataclass
class LayerSpec:
    id: str
    kind: str  # input|conv|pool|bn|relu|shuffle|split|concat|softmax
    params: object = None
    inputs: list[str] = field(default_factory=list)
    row: str = ""  # cost-report row this layer belongs to
    stage: str = ""  # "one"/"two" for layers inside inception-style modules


@dataclass
class SplitAllocation:
    group_count: int
    groups_per_path: tuple[int, ...]
    channels_per_path: tuple[int, ...]


@dataclass
class ModuleGraph:
    layers: list[LayerSpec]
    arch: str
    input_shape: Shape5
    num_classes: int | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {}
        for layer in self.layers:
            if layer.id in self._by_id:
                raise ValueError(f"duplicate layer id {layer.id!r}")
            for ref in layer.inputs:
                if _base_id(ref) not in self._by_id:
                    raise ValueError(
                        f"layer {layer.id!r} references {ref!r} before definition"
                    )
            if layer.kind != "input" and not layer.inputs:
                raise ValueError(f"layer {layer.id!r} has no predecessor")
            self._by_id[layer.id] = layer

    def layer(self, layer_id: str) -> LayerSpec:
        return self._by_id[layer_id]

    @property
    def output_id(self) -> str:
        return self.layers[-1].id


def _base_id(ref: str) -> str:
    return ref.split(":")[0]


def allocate_groups(
    n_groups: int,
    capacities: Sequence[int],
    in_channels: int | None = None,
) -> SplitAllocation:
    """Largest-remainder split of ``n_groups`` shuffle groups over branches,
    proportional to branch capacity; every branch gets at least one group.

    Remainder ties go to the later branch (this is what keeps the canonical
    4b allocation at (6, 6, 2, 2))."""
    caps = list(capacities)
    if n_groups < len(caps):
        raise ValueError(f"need at least {len(caps)} groups, got {n_groups}")
    if any(c <= 0 for c in caps):
        raise ValueError("capacities must be positive")
    total = sum(caps)
    quotas = [n_groups * c / total for c in caps]
    groups = [int(q) for q in quotas]
    remainders = [q - g for q, g in zip(quotas, groups)]
    order = sorted(range(len(caps)), key=lambda i: (-remainders[i], -i))
    for i in order[: n_groups - sum(groups)]:
        groups[i] += 1
    # floor guarantee: move single groups from the largest share
    while min(groups) < 1:
        groups[groups.index(max(groups))] -= 1
        groups[groups.index(min(groups))] += 1
    channels: tuple[int, ...] = ()
    if in_channels is not None:
        if in_channels % n_groups:
            raise ValueError(f"{in_channels} channels not divisible into {n_groups} groups")
        unit = in_channels // n_groups
        channels = tuple(g * unit for g in groups)
    return SplitAllocation(n_groups, tuple(groups), channels)


def shuffle_group_count(in_channels: int) -> int:
    """Largest group count in [4, 16] dividing ``in_channels``, preferring
    counts whose per-group channel unit is even (so the grouped variant can
    halve every branch convolution no matter how the groups are allocated)."""
    for n in range(SHUFFLE_GROUPS, 3, -1):
        if in_channels % n == 0 and (in_channels // n) % 2 == 0:
            return n
    for n in range(SHUFFLE_GROUPS, 3, -1):
        if in_channels % n == 0:
            return n
    raise ValueError(f"no shuffle group count in [4, 16] divides {in_channels}")


class _Builder:
    def __init__(self, arch: str):
        self.arch = arch
        self.layers: list[LayerSpec] = []
        self.notes: list[str] = []

    def add(self, layer: LayerSpec) -> str:
        self.layers.append(layer)
        return layer.id

    def groups_for(self, name: str, cin: int, cout: int, groups: int) -> int:
        """Degroup a convolution whose widths cannot split evenly (only ever
        fires on scaled-down toy widths, never on the canonical tables)."""
        if groups == 1 or (cin % groups == 0 and cout % groups == 0):
            return groups
        self.notes.append(
            f"{name}: widths {cin}->{cout} not divisible into {groups} "
            "groups, using an ungrouped convolution"
        )
        return 1

    def conv_bn_relu(
        self,
        name: str,
        spec: Conv3DSpec,
        input_ref: str,
        row: str = "",
        stage: str = "",
    ) -> str:
        cid = self.add(LayerSpec(name, "conv", spec, [input_ref], row, stage))
        bid = self.add(
            LayerSpec(name + ".bn", "bn", spec.out_channels, [cid], row, stage)
        )
        return self.add(LayerSpec(name + ".relu", "relu", None, [bid], row, stage))

    def inception_module(
        self,
        name: str,
        widths: InceptionWidths,
        in_channels: int,
        input_ref: str,
        row: str = "",
    ) -> tuple[str, int]:
        """Append one Inc/IST/SST/GSST module; returns (output ref, out channels)."""
        variant = self.arch
        conv_groups = 2 if variant == "gsst" else 1
        if variant in ("sst", "gsst"):
            n_shuf = shuffle_group_count(in_channels)
            if n_shuf != SHUFFLE_GROUPS:
                self.notes.append(
                    f"{name}: {in_channels} input channels do not split into "
                    f"{SHUFFLE_GROUPS} even-width groups, shuffling {n_shuf} "
                    "groups instead"
                )
            alloc = allocate_groups(n_shuf, widths.capacities, in_channels)
            sid = self.add(
                LayerSpec(f"{name}.shuffle", "shuffle", n_shuf, [input_ref], row)
            )
            split_id = self.add(
                LayerSpec(
                    f"{name}.split", "split", SplitSpec(alloc.channels_per_path),
                    [sid], row,
                )
            )
            branch_in = [f"{split_id}:{i}" for i in range(4)]
            branch_ch = list(alloc.channels_per_path)
        else:
            branch_in = [input_ref] * 4
            branch_ch = [in_channels] * 4

        def gconv(
            lname: str,
            cin: int,
            cout: int,
            kernel=(1, 1, 1),
            padding=(0, 0, 0),
        ) -> Conv3DSpec:
            g = self.groups_for(lname, cin, cout, conv_groups)
            return Conv3DSpec(cin, cout, kernel, (1, 1, 1), padding, g)

        # branch 1: single pointwise
        b1 = self.conv_bn_relu(
            f"{name}.b1",
            gconv(f"{name}.b1", branch_ch[0], widths.b1),
            branch_in[0],
            row,
            "one",
        )
        # branches 2 and 3: reduce, then 3x3x3 (Inc) or 1x3x3 -> 3x1x1 (others)
        outs = [b1]
        for bi, (reduce_w, out_w) in (
            (2, (widths.b2_reduce, widths.b2_out)),
            (3, (widths.b3_reduce, widths.b3_out)),
        ):
            prefix = f"{name}.b{bi}"
            red = self.conv_bn_relu(
                f"{prefix}.reduce",
                gconv(f"{prefix}.reduce", branch_ch[bi - 1], reduce_w),
                branch_in[bi - 1], row, "one",
            )
            if variant == "i3d":
                full = gconv(
                    f"{prefix}.conv", reduce_w, out_w, (3, 3, 3), (1, 1, 1)
                )
                outs.append(self.conv_bn_relu(f"{prefix}.conv", full, red, row, "two"))
            else:
                spatial = gconv(
                    f"{prefix}.spatial", reduce_w, reduce_w, (1, 3, 3), (0, 1, 1)
                )
                sid = self.conv_bn_relu(f"{prefix}.spatial", spatial, red, row, "two")
                temporal = gconv(
                    f"{prefix}.temporal", reduce_w, out_w, (3, 1, 1), (1, 0, 0)
                )
                outs.append(
                    self.conv_bn_relu(f"{prefix}.temporal", temporal, sid, row, "two")
                )
        # branch 4: maxpool + projection
        pool = self.add(
            LayerSpec(
                f"{name}.b4.pool",
                "pool",
                PoolSpec("max", (3, 3, 3), (1, 1, 1), (1, 1, 1)),
                [branch_in[3]],
                row,
                "one",
            )
        )
        proj = self.conv_bn_relu(
            f"{name}.b4.proj",
            gconv(f"{name}.b4.proj", branch_ch[3], widths.b4_proj),
            pool, row, "two",
        )
        outs.append(proj)
        # keep branch order 1..4 in the concatenation
        ordered = [outs[0], outs[1], outs[2], proj]
        cat = self.add(LayerSpec(f"{name}.concat", "concat", None, ordered, row))
        return cat, widths.out_channels


def build_inception_module(
    widths: InceptionWidths,
    variant: str,
    in_channels: int,
    name: str = "module",
    input_shape: Shape5 | None = None,
) -> ModuleGraph:
    """Standalone single-module graph (used for per-module cost analysis)."""
    if variant not in ARCHS:
        raise ValueError(f"unknown variant {variant!r}")
    if input_shape is None:
        input_shape = Shape5(1, in_channels, 8, 14, 14)
    b = _Builder(variant)
    b.add(LayerSpec("input", "input", input_shape))
    b.inception_module(name, widths, in_channels, "input", row=name)
    return ModuleGraph(b.layers, variant, input_shape, notes=b.notes)


def build_network(
    arch: str,
    input_shape: Shape5 | tuple,
    num_classes: int = 60,
    width_mult: float = 1.0,
    width_overrides: dict[str, InceptionWidths] | None = None,
) -> ModuleGraph:
    """Assemble a full network graph for one of the four architectures."""
    arch = arch.lower()
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    input_shape = Shape5(*input_shape)
    if input_shape.c < 1:
        raise ValueError("input must have at least one channel")

    def scale(v: int) -> int:
        return max(1, round(v * width_mult))

    stem_groups = 2 if arch == "gsst" else 1
    b = _Builder(arch)
    b.add(LayerSpec("input", "input", input_shape))
    c_in = input_shape.c
    w64, w192 = scale(64), scale(192)

    if arch == "i3d":
        cur = b.conv_bn_relu(
            "conv1",
            Conv3DSpec(c_in, w64, (7, 7, 7), (2, 2, 2), (3, 3, 3)),
            "input",
            "conv1",
        )
    else:
        cur = b.conv_bn_relu(
            "conv1.spatial",
            Conv3DSpec(c_in, w64, (1, 7, 7), (1, 2, 2), (0, 3, 3)),
            "input",
            "conv1",
        )
        cur = b.conv_bn_relu(
            "conv1.temporal",
            Conv3DSpec(w64, w64, (7, 1, 1), (2, 1, 1), (3, 0, 0)),
            cur,
            "conv1",
        )
    cur = b.add(
        LayerSpec(
            "maxp1", "pool",
            PoolSpec("max", (1, 3, 3), (1, 2, 2), (0, 1, 1)), [cur], "maxp1",
        )
    )
    cur = b.conv_bn_relu(
        "conv2",
        Conv3DSpec(
            w64, w64, (1, 1, 1), groups=b.groups_for("conv2", w64, w64, stem_groups)
        ),
        cur,
        "conv2",
    )
    if arch == "i3d":
        cur = b.conv_bn_relu(
            "conv3",
            Conv3DSpec(w64, w192, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
            cur,
            "conv3",
        )
    else:
        cur = b.conv_bn_relu(
            "conv3.spatial",
            Conv3DSpec(
                w64, w64, (1, 3, 3), (1, 1, 1), (0, 1, 1),
                b.groups_for("conv3.spatial", w64, w64, stem_groups),
            ),
            cur,
            "conv3",
        )
        cur = b.conv_bn_relu(
            "conv3.temporal",
            Conv3DSpec(
                w64, w192, (3, 1, 1), (1, 1, 1), (1, 0, 0),
                b.groups_for("conv3.temporal", w64, w192, stem_groups),
            ),
            cur,
            "conv3",
        )
    cur = b.add(
        LayerSpec(
            "maxp2", "pool",
            PoolSpec("max", (1, 3, 3), (1, 2, 2), (0, 1, 1)), [cur], "maxp2",
        )
    )
    channels = w192
    between = {
        "mg3": PoolSpec("max", (3, 3, 3), (2, 2, 2), (1, 1, 1)),
        "mg4": PoolSpec("max", (2, 2, 2), (2, 2, 2), (0, 0, 0)),
        "mg5": None,
    }
    pool_row = {"mg3": "maxp3", "mg4": "maxp4"}
    for group, module_names in MODULE_GROUPS.items():
        for mod in module_names:
            widths = (width_overrides or {}).get(mod, WIDTH_TABLE[mod])
            if width_overrides is None or mod not in width_overrides:
                widths = widths.scaled(width_mult)
            cur, channels = b.inception_module(mod, widths, channels, cur, row=group)
        trailing = between[group]
        if trailing is not None:
            cur = b.add(
                LayerSpec(pool_row[group], "pool", trailing, [cur], pool_row[group])
            )
    # final average pool: canonical kernel 2x7x7, clamped to the actual
    # feature-map extent so small toy inputs stay valid
    graph_so_far = ModuleGraph(list(b.layers), arch, input_shape, notes=b.notes)
    feat = infer_shapes(graph_so_far)[_base_id(cur)]
    avg_kernel = (min(2, feat.t), min(7, feat.h), min(7, feat.w))
    cur = b.add(
        LayerSpec("avgp", "pool", PoolSpec("avg", avg_kernel), [cur], "avgp")
    )
    cur = b.add(
        LayerSpec(
            "classifier", "conv",
            Conv3DSpec(channels, num_classes, (1, 1, 1)), [cur], "classifier",
        )
    )
    b.add(LayerSpec("softmax", "softmax", None, [cur], "classifier"))
    return ModuleGraph(b.layers, arch, input_shape, num_classes, notes=b.notes)


def infer_shapes(g: ModuleGraph, input_shape: Shape5 | None = None) -> dict[str, Shape5]:
    """Propagate shapes through the DAG; raises naming the first bad layer."""
    shapes: dict[str, Shape5] = {}

    def shape_of(ref: str) -> Shape5:
        base = _base_id(ref)
        s = shapes[base]
        if ":" in ref:
            layer = g.layer(base)
            if layer.kind != "split":
                raise ValueError(f"port reference {ref!r} into non-split layer")
            k = int(ref.split(":")[1])
            return Shape5(s.n, layer.params.sizes[k], s.t, s.h, s.w)
        return s

    for layer in g.layers:
        try:
            if layer.kind == "input":
                shapes[layer.id] = Shape5(*(input_shape or layer.params))
                continue
            ins = [shape_of(r) for r in layer.inputs]
            x = ins[0]
            if layer.kind == "conv":
                shapes[layer.id] = layer.params.output_shape(x)
            elif layer.kind == "pool":
                shapes[layer.id] = layer.params.output_shape(x)
            elif layer.kind == "bn":
                if x.c != layer.params:
                    raise ValueError(
                        f"bn over {layer.params} channels fed {x.c} channels"
                    )
                shapes[layer.id] = x
            elif layer.kind in ("relu", "softmax"):
                shapes[layer.id] = x
            elif layer.kind == "shuffle":
                if x.c % layer.params:
                    raise ValueError(
                        f"{x.c} channels not divisible by shuffle groups {layer.params}"
                    )
                shapes[layer.id] = x
            elif layer.kind == "split":
                if sum(layer.params.sizes) != x.c:
                    raise ValueError(
                        f"split sizes {layer.params.sizes} do not sum to {x.c}"
                    )
                shapes[layer.id] = x
            elif layer.kind == "concat":
                for s in ins[1:]:
                    if (s.n, s.t, s.h, s.w) != (x.n, x.t, x.h, x.w):
                        raise ValueError("concat inputs disagree on n/t/h/w")
                shapes[layer.id] = Shape5(x.n, sum(s.c for s in ins), x.t, x.h, x.w)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        except ValueError as e:
            raise ValueError(f"shape inference failed at {layer.id!r}: {e}") from e
    return shapes


def parameterized_layers(g: ModuleGraph) -> list[LayerSpec]:
    """Conv and bn layers in topological order; defines weight-file record order."""
    return [layer for layer in g.layers if layer.kind in ("conv", "bn")]


def emit_manifest(g: ModuleGraph) -> str:
    """Canonical manifest: one tab-separated line per parameterized layer."""
    lines = []
    for layer in parameterized_layers(g):
        if layer.kind == "conv":
            s = layer.params
            lines.append(
                "\t".join(
                    [layer.id, "conv", str(s.in_channels), str(s.out_channels)]
                    + [str(v) for v in (*s.kernel, *s.stride, *s.padding, s.groups)]
                )
            )
        else:
            lines.append("\t".join([layer.id, "bn", str(layer.params)]))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> list[tuple[str, str, object]]:
    records: list[tuple[str, str, object]] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[1] == "conv":
            vals = [int(v) for v in parts[2:]]
            spec = Conv3DSpec(
                vals[0], vals[1], tuple(vals[2:5]), tuple(vals[5:8]),
                tuple(vals[8:11]), vals[11],
            )
            records.append((parts[0], "conv", spec))
        elif parts[1] == "bn":
            records.append((parts[0], "bn", int(parts[2])))
        else:
            raise ValueError(f"unknown manifest record kind {parts[1]!r}")
    return records


@dataclass
class NetworkConfig:
    arch: str
    input: tuple[int, int, int, int]  # (c, t, h, w); batch implied 1
    classes: int = 60
    width_mult: float = 1.0
    width_overrides: dict[str, InceptionWidths] = field(default_factory=dict)


def parse_shape_arg(text: str) -> tuple[int, ...]:
    """Parse the CxTxHxW command-line / config shape form."""
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise ValueError(f"bad shape {text!r}: {e}") from e
    if any(d < 1 for d in dims):
        raise ValueError(f"bad shape {text!r}: dims must be positive")
    return dims


def parse_network_config(path) -> NetworkConfig:
    """Read the declarative architecture description (INI key-value sections)."""
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)
    if "network" not in cp:
        raise ValueError(f"{path}: missing [network] section")
    net = cp["network"]
    dims = parse_shape_arg(net["input"])
    if len(dims) != 4:
        raise ValueError(f"{path}: input must be CxTxHxW, got {net['input']!r}")
    overrides: dict[str, InceptionWidths] = {}
    for section in cp.sections():
        if section.startswith("widths."):
            mod = section.split(".", 1)[1]
            if mod not in WIDTH_TABLE:
                raise ValueError(f"{path}: unknown module {mod!r} in {section}")
            vals = cp[section]
            overrides[mod] = InceptionWidths(
                *(int(vals[k]) for k in InceptionWidths._fields)
            )
    return NetworkConfig(
        arch=net["arch"].lower(),
        input=dims,
        classes=net.getint("classes", 60),
        width_mult=net.getfloat("width_mult", 1.0),
        width_overrides=overrides,
    )
