"""Declarative cascade graphs: specs, presets, validator, compiler.

A cascade is a backbone (encoder 0) whose block outputs enter side paths,
followed by encoders of transition nodes and a decoder. A transition node at
level m in encoder k consumes producers from encoder k-1 at levels >= m (the
"not shallower" rule), so the graph is a layered DAG by construction.

Transition-node forward semantics: each input goes through its own 3x3 conv
to the node's channel count, is bilinearly upsampled by the stride ratio,
all are summed, and a 3x3 anti-alias conv finishes the node. There is no
activation inside a node; the fusion is linear (checked by tests). An
optional identity path adds the same-level raw input to the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import backbone as bb
from . import program
from .engine import Tensor
from .program import ParamSpec, Step, conv_step


@dataclass(frozen=True)
class SidePathSpec:
    level: int
    stride: int
    channels: int
    pre_convs: int


@dataclass(frozen=True)
class TransitionNodeSpec:
    encoder: int
    level: int
    inputs: tuple  # sorted producer levels in encoder k-1
    channels: int
    identity_path: bool = False


@dataclass(frozen=True)
class EncoderSpec:
    index: int
    nodes: tuple  # TransitionNodeSpec, kept ordered by level

    def __post_init__(self):
        # canonical order: declaration order never matters
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.level)))


@dataclass(frozen=True)
class CascadeSpec:
    task: str
    backbone: bb.BackboneVariant
    side_paths: tuple
    encoders: tuple
    decoder: str  # "topdown" | "side_supervision"
    route_uncovered: bool = False

    def __post_init__(self):
        object.__setattr__(self, "side_paths",
                           tuple(sorted(self.side_paths, key=lambda s: s.level)))
        object.__setattr__(self, "encoders",
                           tuple(sorted(self.encoders, key=lambda e: e.index)))


# Logical execution plan ------------------------------------------------------


@dataclass(frozen=True)
class SidePathStep:
    level: int
    stride: int
    channels: int
    pre_convs: int


@dataclass(frozen=True)
class NodeStep:
    encoder: int
    level: int
    inputs: tuple  # (level, stride_factor, in_channels)
    channels: int
    stride: int
    identity_path: bool


@dataclass(frozen=True)
class DecoderStep:
    variant: str
    consumes: tuple  # (encoder, level, stride, channels) deep -> shallow


@dataclass(frozen=True)
class ExecutionPlan:
    steps: tuple


# Connection tables -----------------------------------------------------------

# Preset connection lists, per task: encoder index -> {node level: input levels}.
PRESET_CONNECTIONS = {
    "saliency": {
        1: {1: (1, 2, 3, 4, 5), 2: (2, 3, 4, 5, 6), 3: (3, 4, 5, 6), 4: (4, 5, 6), 5: (5, 6)},
        2: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
    },
    "edge": {
        1: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
        2: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4)},
    },
}
PRESET_CONNECTIONS["skeleton"] = PRESET_CONNECTIONS["edge"]

# Published ablation variants of the connection pattern.
ABLATION_CONNECTIONS = {
    "saliency": {
        1: PRESET_CONNECTIONS["saliency"],
        2: {
            1: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5, 6), 5: (5, 6)},
            2: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
        },
        3: {
            1: {1: (1, 2), 2: (2, 3), 3: (3, 4), 4: (4, 5), 5: (5, 6)},
            2: {1: (1, 2), 2: (2, 3), 3: (3, 4), 4: (4, 5)},
        },
        4: {
            1: {1: (1, 2, 3, 4), 2: (2, 3, 4, 5), 3: (3, 4, 5, 6), 4: (4, 5, 6), 5: (5, 6)},
            2: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
        },
    },
    "edge": {
        1: {
            1: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
            2: {1: (1, 2), 2: (2, 3), 3: (3, 4)},
        },
        2: {
            1: {1: (1, 2, 3), 2: (2, 3, 4), 3: (3, 4, 5), 4: (4, 5)},
            2: {1: (1,), 2: (2,), 3: (3,), 4: (4,)},
        },
        3: {
            1: {1: (1, 2, 3, 4), 2: (2, 3, 4, 5), 3: (3, 4, 5), 4: (4, 5)},
            2: {1: (1, 2, 3, 4), 2: (2, 3, 4), 3: (3, 4)},
        },
    },
}

# Side-path channel tables (unscaled); skeleton level 5 taps the raw conv5
# features with no pre-convs, so its channels come from the backbone.
_SIDE_CHANNELS = {
    "saliency": {1: 32, 2: 64, 3: 128, 4: 256, 5: 512, 6: 512},
    "edge": {1: 16, 2: 16, 3: 16, 4: 16, 5: 16},
    "skeleton": {1: 32, 2: 64, 3: 128, 4: 256},
}
_PRE_CONVS = {"saliency": 2, "edge": 1, "skeleton": 1}

DECODER_BY_TASK = {"saliency": "topdown", "edge": "side_supervision",
                   "skeleton": "side_supervision"}


def _side_paths_for(task, variant):
    strides = bb.block_strides(variant)
    ws = variant.width_scale
    paths = []
    for level in range(1, len(variant.blocks) + 1):
        table = _SIDE_CHANNELS[task]
        if level in table:
            channels = bb.scaled_channels(table[level], ws)
            pre = _PRE_CONVS[task]
        elif task == "skeleton" and level == 5:
            channels = variant.blocks[4].channels  # raw conv5 tap
            pre = 0
        else:
            raise ValueError(f"no side-path definition for task {task} level {level}")
        paths.append(SidePathSpec(level=level, stride=strides[level - 1],
                                  channels=channels, pre_convs=pre))
    return tuple(paths)


def _node_channels(task, level, variant):
    table = _SIDE_CHANNELS[task]
    if level in table:
        return bb.scaled_channels(table[level], variant.width_scale)
    raise ValueError(f"no channel table entry for task {task} level {level}")


def _build_spec(task, connections, width_scale, num_encoders, include_conv5):
    variant = bb.build_backbone(task, width_scale)
    side_paths = _side_paths_for(task, variant)
    if task == "skeleton" and not include_conv5:
        side_paths = tuple(sp for sp in side_paths if sp.level != 5)
    encoders = []
    for k in sorted(connections):
        if k > num_encoders:
            continue
        nodes = []
        for level in sorted(connections[k]):
            inputs = connections[k][level]
            if task == "skeleton" and not include_conv5 and k == 1:
                inputs = tuple(l for l in inputs if l != 5)
            nodes.append(TransitionNodeSpec(
                encoder=k, level=level, inputs=tuple(sorted(inputs)),
                channels=_node_channels(task, level, variant),
            ))
        encoders.append(EncoderSpec(index=k, nodes=tuple(nodes)))
    return CascadeSpec(
        task=task,
        backbone=variant,
        side_paths=side_paths,
        encoders=tuple(encoders),
        decoder=DECODER_BY_TASK[task],
        route_uncovered=(task == "saliency"),
    )


def preset_pattern(task, width_scale=0.125, num_encoders=2, include_conv5=True):
    """The published connection pattern for a task.

    ``num_encoders`` in {0, 1, 2} supports the encoder-count comparison
    (0 puts the decoder directly on the backbone side paths).
    """
    if task not in bb.TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {bb.TASKS}")
    if num_encoders not in (0, 1, 2):
        raise ValueError("num_encoders must be 0, 1 or 2")
    return _build_spec(task, PRESET_CONNECTIONS[task], width_scale, num_encoders,
                       include_conv5)


def ablation_pattern(task, pattern_id, width_scale=0.125):
    """Published signal-flow variants (saliency patterns 1-4, edge 1-3)."""
    if task not in ABLATION_CONNECTIONS:
        raise ValueError(f"no ablation patterns are defined for task {task!r}")
    table = ABLATION_CONNECTIONS[task]
    if pattern_id not in table:
        raise ValueError(f"invalid pattern id {pattern_id} for task {task!r}; "
                         f"valid ids: {sorted(table)}")
    return _build_spec(task, table[pattern_id], width_scale, 2, True)


# Producer lookup -------------------------------------------------------------


def producer_map(spec):
    """(encoder, level) -> (stride, channels) for every producer."""
    strides = bb.block_strides(spec.backbone)
    out = {}
    for sp in spec.side_paths:
        out[(0, sp.level)] = (sp.stride, sp.channels)
    for enc in spec.encoders:
        for node in enc.nodes:
            stride = strides[node.level - 1] if 1 <= node.level <= len(strides) else None
            out[(enc.index, node.level)] = (stride, node.channels)
    return out


def decoder_consumes(spec):
    """Producers feeding the decoder, ordered deep to shallow.

    The decoder always sees the last encoder's nodes. With
    ``route_uncovered`` it additionally takes, for each side-path level the
    last encoder does not provide, the deepest earlier producer of that
    level (possibly the side path itself).
    """
    producers = producer_map(spec)
    last = max((e.index for e in spec.encoders), default=0)
    consumed = {}
    if last == 0:
        for sp in spec.side_paths:
            consumed[sp.level] = (0, sp.level)
    else:
        last_enc = next(e for e in spec.encoders if e.index == last)
        for node in last_enc.nodes:
            consumed[node.level] = (last, node.level)
        if spec.route_uncovered:
            for sp in spec.side_paths:
                if sp.level in consumed:
                    continue
                for k in range(last - 1, -1, -1):
                    if (k, sp.level) in producers:
                        consumed[sp.level] = (k, sp.level)
                        break
    ordered = sorted(consumed.values(), key=lambda kl: kl[1], reverse=True)
    return tuple((k, l, producers[(k, l)][0], producers[(k, l)][1]) for k, l in ordered)


# Validation ------------------------------------------------------------------


def validate(spec) -> list[str]:
    """All rule violations, each naming the offending node or edge.

    An empty list means the spec is valid. The layered producer rule
    (encoder k reads only encoder k-1) makes cycles impossible; the checks
    below cover resolvability, ordering and the not-shallower rule.
    """
    violations = []
    strides = bb.block_strides(spec.backbone)
    n_blocks = len(spec.backbone.blocks)

    seen_levels = set()
    for sp in spec.side_paths:
        if not 1 <= sp.level <= n_blocks:
            violations.append(f"E0.L{sp.level}: side path level outside backbone blocks 1..{n_blocks}")
            continue
        if sp.level in seen_levels:
            violations.append(f"E0.L{sp.level}: duplicate side path level")
        seen_levels.add(sp.level)
        if sp.stride != strides[sp.level - 1]:
            violations.append(
                f"E0.L{sp.level}: stride {sp.stride} does not match backbone stride "
                f"{strides[sp.level - 1]}"
            )
        if sp.channels < 1:
            violations.append(f"E0.L{sp.level}: channels must be positive")
        if sp.pre_convs < 0:
            violations.append(f"E0.L{sp.level}: negative pre_convs")

    prev_levels = {sp.level for sp in spec.side_paths}
    expected_index = 1
    for enc in spec.encoders:
        if enc.index != expected_index:
            violations.append(f"E{enc.index}: encoder indices must be contiguous from 1")
        expected_index = enc.index + 1
        last_level = 0
        this_levels = set()
        for node in enc.nodes:
            tag = f"E{enc.index}.node{node.level}"
            if not 1 <= node.level <= n_blocks:
                violations.append(f"{tag}: node level outside backbone blocks 1..{n_blocks}")
            if node.encoder != enc.index:
                violations.append(f"{tag}: node carries encoder index {node.encoder}")
            if node.level <= last_level:
                violations.append(f"{tag}: node levels must strictly increase")
            last_level = node.level
            if node.channels < 1:
                violations.append(f"{tag}: channels must be positive")
            if not node.inputs:
                violations.append(f"{tag}: empty input list")
            if list(node.inputs) != sorted(set(node.inputs)):
                violations.append(f"{tag}: inputs must be sorted and unique")
            for l in node.inputs:
                if l not in prev_levels:
                    violations.append(
                        f"{tag}: unresolved producer E{enc.index - 1}.L{l}"
                    )
                elif l < node.level:
                    violations.append(
                        f"{tag}: shallower input (level {l} < {node.level}) on edge "
                        f"E{enc.index - 1}.L{l}->E{enc.index}.L{node.level}"
                    )
            this_levels.add(node.level)
        prev_levels = this_levels

    if spec.decoder not in ("topdown", "side_supervision"):
        violations.append(f"decoder: unknown variant {spec.decoder!r}")
    else:
        try:
            consumes = decoder_consumes(spec)
        except Exception:
            consumes = ()
        if not consumes:
            violations.append("decoder: nothing to consume")
        elif spec.decoder == "side_supervision" and len(consumes) < 2:
            violations.append("decoder: side_supervision needs at least 2 features")
        else:
            last_stride = None
            for _, level, stride, _ in consumes:
                if last_stride is not None and stride > last_stride:
                    violations.append(
                        f"decoder: stride increases at level {level} (consumption must "
                        f"run deep to shallow)"
                    )
                last_stride = stride
    return violations


def compile(spec) -> ExecutionPlan:
    """Lower a valid spec to a deterministic logical plan.

    Side paths by level, then encoders by index with nodes by level, then
    one decoder step: producers always precede consumers, and permuting the
    declaration order of nodes yields the identical plan.
    """
    violations = validate(spec)
    if violations:
        raise ValueError("invalid cascade spec:\n" + "\n".join(violations))

    producers = producer_map(spec)
    steps = []
    for sp in sorted(spec.side_paths, key=lambda s: s.level):
        steps.append(SidePathStep(sp.level, sp.stride, sp.channels, sp.pre_convs))
    strides = bb.block_strides(spec.backbone)
    for enc in sorted(spec.encoders, key=lambda e: e.index):
        for node in sorted(enc.nodes, key=lambda n: n.level):
            node_stride = strides[node.level - 1]
            ins = []
            for l in node.inputs:
                in_stride, in_channels = producers[(enc.index - 1, l)]
                if in_stride % node_stride:
                    raise ValueError(
                        f"E{enc.index}.node{node.level}: stride ratio "
                        f"{in_stride}/{node_stride} is not an integer"
                    )
                ins.append((l, in_stride // node_stride, in_channels))
            steps.append(NodeStep(enc.index, node.level, tuple(ins), node.channels,
                                  node_stride, node.identity_path))
    steps.append(DecoderStep(spec.decoder, decoder_consumes(spec)))
    return ExecutionPlan(steps=tuple(steps))


# Transition-node forward -----------------------------------------------------


def node_param_prefix(encoder, level):
    return f"E{encoder}.n{level}"


def node_steps(node_step: NodeStep, in_slots, out_slot):
    """Micro steps and parameter specs for one transition node.

    ``in_slots`` maps input level -> slot name of the producer feature.
    """
    prefix = node_param_prefix(node_step.encoder, node_step.level)
    steps = []
    specs = []
    summands = []
    for level, factor, in_channels in node_step.inputs:
        wname = f"{prefix}.in{level}.w"
        bname = f"{prefix}.in{level}.b"
        specs.append(ParamSpec(wname, (node_step.channels, in_channels, 3, 3), "he"))
        specs.append(ParamSpec(bname, (1, node_step.channels, 1, 1), "zero"))
        conv_slot = f"{out_slot}.from{level}.conv"
        steps.append(conv_step(in_slots[level], conv_slot, wname, bname, padding=1))
        up_slot = f"{out_slot}.from{level}.up"
        steps.append(Step("upsample", (conv_slot,), up_slot, {"factor": factor}))
        summands.append(up_slot)
    sum_slot = f"{out_slot}.sum"
    steps.append(Step("sum", tuple(summands), sum_slot))
    wname = f"{prefix}.aa.w"
    bname = f"{prefix}.aa.b"
    specs.append(ParamSpec(wname, (node_step.channels, node_step.channels, 3, 3), "he"))
    specs.append(ParamSpec(bname, (1, node_step.channels, 1, 1), "zero"))

    identity_src = None
    if node_step.identity_path:
        for level, factor, in_channels in node_step.inputs:
            if level == node_step.level and factor == 1 and in_channels == node_step.channels:
                identity_src = in_slots[level]
                break
    if identity_src is None:
        steps.append(conv_step(sum_slot, out_slot, wname, bname, padding=1))
    else:
        aa_slot = f"{out_slot}.aa"
        steps.append(conv_step(sum_slot, aa_slot, wname, bname, padding=1))
        steps.append(Step("sum", (aa_slot, identity_src), out_slot))
    return steps, specs


def forward_transition_node(node: TransitionNodeSpec, inputs, input_strides,
                            node_stride, params) -> Tensor:
    """Run one node on explicit input tensors (mainly for tests and docs).

    ``inputs`` are ordered by level to match ``node.inputs``;
    ``input_strides`` gives each input's stride. Parameters follow the
    ``E{k}.n{m}.in{level}`` / ``.aa`` naming used by the compiler.
    """
    if len(inputs) != len(node.inputs):
        raise ValueError(f"node expects {len(node.inputs)} inputs, got {len(inputs)}")
    ins = []
    for level, stride, t in zip(node.inputs, input_strides, inputs):
        if stride % node_stride:
            raise ValueError(f"stride ratio {stride}/{node_stride} is not a positive integer")
        ins.append((level, stride // node_stride, t.shape[1]))
    ns = NodeStep(node.encoder, node.level, tuple(ins), node.channels, node_stride,
                  node.identity_path)
    in_slots = {level: f"in{level}" for level in node.inputs}
    steps, _ = node_steps(ns, in_slots, "out")
    env = {f"in{level}": t for level, t in zip(node.inputs, inputs)}
    program.run_tensor(steps, params, env)
    return env["out"]


def node_param_specs(node: TransitionNodeSpec, input_channels):
    """Parameter specs for forward_transition_node callers."""
    ins = tuple((l, 1, c) for l, c in zip(node.inputs, input_channels))
    ns = NodeStep(node.encoder, node.level, ins, node.channels, 1, node.identity_path)
    _, specs = node_steps(ns, {l: f"in{l}" for l in node.inputs}, "out")
    return specs


# Graph analysis --------------------------------------------------------------


def enumerate_signal_flows(spec):
    """All paths from a side path to a last-encoder node, in flow order.

    Each path is a tuple of (encoder, level) pairs; levels never increase
    along a path because inputs are never shallower than their node.
    """
    last = max((e.index for e in spec.encoders), default=0)
    if last == 0:
        return [((0, sp.level),) for sp in sorted(spec.side_paths, key=lambda s: s.level)]
    # adjacency: (k-1, input_level) -> list of (k, node_level)
    adj = {}
    for enc in spec.encoders:
        for node in enc.nodes:
            for l in node.inputs:
                adj.setdefault((enc.index - 1, l), []).append((enc.index, node.level))
    paths = []

    def walk(prefix):
        k, _ = prefix[-1]
        if k == last:
            paths.append(tuple(prefix))
            return
        for nxt in sorted(adj.get(prefix[-1], [])):
            walk(prefix + [nxt])

    for sp in sorted(spec.side_paths, key=lambda s: s.level):
        walk([(0, sp.level)])
    return paths


def to_dot(spec) -> str:
    """DOT text of the node DAG; edges carry their upsample factor."""
    lines = ["digraph cascade {", "  rankdir=LR;"]
    strides = bb.block_strides(spec.backbone)
    stride_at = {lvl: strides[lvl - 1] for lvl in range(1, len(strides) + 1)}
    for sp in sorted(spec.side_paths, key=lambda s: s.level):
        lines.append(f'  "T0^{sp.level}" [shape=box];')
    for enc in sorted(spec.encoders, key=lambda e: e.index):
        for node in sorted(enc.nodes, key=lambda n: n.level):
            lines.append(f'  "T{enc.index}^{node.level}" [shape=ellipse];')
    lines.append('  "D" [shape=diamond];')
    for enc in sorted(spec.encoders, key=lambda e: e.index):
        for node in sorted(enc.nodes, key=lambda n: n.level):
            for l in node.inputs:
                factor = stride_at[l] // stride_at[node.level]
                lines.append(
                    f'  "T{enc.index - 1}^{l}" -> "T{enc.index}^{node.level}" '
                    f'[label="x{factor}"];'
                )
    for k, l, _, _ in decoder_consumes(spec):
        lines.append(f'  "T{k}^{l}" -> "D";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def count_edges(spec) -> int:
    return sum(len(node.inputs) for enc in spec.encoders for node in enc.nodes)


def count_nodes(spec) -> int:
    return len(spec.side_paths) + sum(len(enc.nodes) for enc in spec.encoders)
