"""The two decoder forms: top-down fusion and side supervision.

Top-down fusion (saliency): a running accumulator starts at the deepest
feature, is upsampled to each shallower feature's stride, projected with a
3x3 conv only when channel counts differ, and summed; a final 3x3 conv to
one channel plus sigmoid produces the score map. One loss term.

Side supervision (edge/skeleton): every consumed feature gets a 1x1 conv to
one channel, its logits are upsampled to stride 1 (the side maps, each with
its own loss), and a weighted-fusion 1x1 conv over the stacked side logits
yields the fused map. Fusion weights start at 1/n so the initial fused map
is the side mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import engine, program
from .engine import Tensor
from .program import ParamSpec, Step, conv_step

VARIANTS = ("topdown", "side_supervision")


@dataclass(frozen=True)
class DecoderKind:
    variant: str
    consumes: tuple  # (encoder, level, stride, channels), deep -> shallow


@dataclass
class DecoderOutputs:
    """Final probability map plus the logits the losses are computed from."""

    prob: Tensor
    logits: Tensor
    side_probs: list = field(default_factory=list)
    side_logits: list = field(default_factory=list)


def _check_consumption_order(strides):
    last = None
    for s in strides:
        if last is not None and s > last:
            raise ValueError(
                f"stride ordering violated: decoder consumption must run deep to "
                f"shallow, got stride {s} after {last}"
            )
        last = s


def topdown_steps(feature_slots, strides, channels, prefix="decoder"):
    """Lower top-down fusion to program steps.

    Returns (steps, param_specs, slots) with slots = {"logits", "prob"}.
    """
    if len(feature_slots) < 1:
        raise ValueError("top-down decoder needs at least one feature")
    _check_consumption_order(strides)
    steps = []
    specs = []
    acc = feature_slots[0]
    acc_stride = strides[0]
    acc_ch = channels[0]
    for i in range(1, len(feature_slots)):
        factor, rem = divmod(acc_stride, strides[i])
        if rem:
            raise ValueError(
                f"stride {acc_stride} is not an integer multiple of {strides[i]}"
            )
        up = f"{prefix}.td{i}.up"
        steps.append(Step("upsample", (acc,), up, {"factor": factor}))
        merged = up
        if acc_ch != channels[i]:
            wname = f"{prefix}.proj{i}.w"
            bname = f"{prefix}.proj{i}.b"
            specs.append(ParamSpec(wname, (channels[i], acc_ch, 3, 3), "he"))
            specs.append(ParamSpec(bname, (1, channels[i], 1, 1), "zero"))
            merged = f"{prefix}.td{i}.proj"
            steps.append(conv_step(up, merged, wname, bname, padding=1))
        acc = f"{prefix}.td{i}"
        steps.append(Step("sum", (merged, feature_slots[i]), acc))
        acc_stride = strides[i]
        acc_ch = channels[i]
    specs.append(ParamSpec(f"{prefix}.head.w", (1, acc_ch, 3, 3), "he"))
    specs.append(ParamSpec(f"{prefix}.head.b", (1, 1, 1, 1), "zero"))
    head = f"{prefix}.head"
    steps.append(conv_step(acc, head, f"{prefix}.head.w", f"{prefix}.head.b", padding=1))
    logits = f"{prefix}.logits"
    if acc_stride > 1:
        steps.append(Step("upsample", (head,), logits, {"factor": acc_stride}))
    else:
        steps.append(Step("sum", (head,), logits))
    prob = f"{prefix}.prob"
    steps.append(Step("sigmoid", (logits,), prob))
    return steps, specs, {"logits": logits, "prob": prob,
                          "side_logits": [], "side_probs": []}


def side_supervision_steps(feature_slots, strides, channels, prefix="decoder"):
    """Lower the side-supervision decoder to program steps."""
    n = len(feature_slots)
    if n < 2:
        raise ValueError("side supervision needs at least 2 features")
    _check_consumption_order(strides)
    steps = []
    specs = []
    side_logit_slots = []
    side_prob_slots = []
    for i in range(n):
        wname = f"{prefix}.side{i + 1}.w"
        bname = f"{prefix}.side{i + 1}.b"
        specs.append(ParamSpec(wname, (1, channels[i], 1, 1), "he"))
        specs.append(ParamSpec(bname, (1, 1, 1, 1), "zero"))
        at_stride = f"{prefix}.side{i + 1}.conv"
        steps.append(conv_step(feature_slots[i], at_stride, wname, bname))
        logits = f"{prefix}.side{i + 1}.logits"
        steps.append(Step("upsample", (at_stride,), logits, {"factor": strides[i]}))
        side_logit_slots.append(logits)
        prob = f"{prefix}.side{i + 1}.prob"
        steps.append(Step("sigmoid", (logits,), prob))
        side_prob_slots.append(prob)
    stacked = f"{prefix}.sides"
    steps.append(Step("concat", tuple(side_logit_slots), stacked))
    specs.append(ParamSpec(f"{prefix}.fuse.w", (1, n, 1, 1), "const", 1.0 / n))
    specs.append(ParamSpec(f"{prefix}.fuse.b", (1, 1, 1, 1), "zero"))
    logits = f"{prefix}.logits"
    steps.append(conv_step(stacked, logits, f"{prefix}.fuse.w", f"{prefix}.fuse.b"))
    prob = f"{prefix}.prob"
    steps.append(Step("sigmoid", (logits,), prob))
    return steps, specs, {"logits": logits, "prob": prob,
                          "side_logits": side_logit_slots, "side_probs": side_prob_slots}


def _run(steps, params, env, slots):
    program.run_tensor(steps, params, env)
    return DecoderOutputs(
        prob=env[slots["prob"]],
        logits=env[slots["logits"]],
        side_probs=[env[s] for s in slots["side_probs"]],
        side_logits=[env[s] for s in slots["side_logits"]],
    )


def topdown_param_specs(strides, channels, prefix="decoder"):
    _, specs, _ = topdown_steps(["f%d" % i for i in range(len(strides))],
                                strides, channels, prefix)
    return specs


def side_supervision_param_specs(strides, channels, prefix="decoder"):
    _, specs, _ = side_supervision_steps(["f%d" % i for i in range(len(strides))],
                                         strides, channels, prefix)
    return specs


def forward_topdown(features, strides, params) -> DecoderOutputs:
    """Run top-down fusion on explicit features (deep to shallow)."""
    slots = [f"f{i}" for i in range(len(features))]
    steps, _, out_slots = topdown_steps(slots, strides, [f.shape[1] for f in features])
    env = dict(zip(slots, features))
    return _run(steps, params, env, out_slots)


def forward_side_supervision(features, strides, params) -> DecoderOutputs:
    """Run side supervision on explicit features (deep to shallow)."""
    slots = [f"f{i}" for i in range(len(features))]
    steps, _, out_slots = side_supervision_steps(slots, strides,
                                                 [f.shape[1] for f in features])
    env = dict(zip(slots, features))
    return _run(steps, params, env, out_slots)


def decoder_loss_terms(variant, outputs: DecoderOutputs, gt: Tensor, loss="bce"):
    """One fused-loss term for top-down, one per side plus fused otherwise."""
    if loss == "bce":
        loss_fn = engine.bce_with_logits
    elif loss == "class_balanced":
        loss_fn = engine.class_balanced_bce_with_logits
    else:
        raise ValueError(f"unknown loss kind {loss!r}")
    if variant == "topdown":
        return [loss_fn(outputs.logits, gt)]
    if variant == "side_supervision":
        terms = [loss_fn(s, gt) for s in outputs.side_logits]
        terms.append(loss_fn(outputs.logits, gt))
        return terms
    raise ValueError(f"unknown decoder variant {variant!r}")


def decoder_losses(variant, outputs: DecoderOutputs, gt: Tensor, loss="bce") -> Tensor:
    """Total decoder loss: the unweighted sum of the variant's terms."""
    terms = decoder_loss_terms(variant, outputs, gt, loss)
    return terms[0] if len(terms) == 1 else engine.sum_n(terms)
