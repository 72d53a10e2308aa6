"""Flat executable step lists ("programs") over named tensor slots.

Backbone, cascade and decoder all lower to the same step vocabulary, so there
is exactly one forward definition per network. Programs run in two modes:

* tensor mode: engine ops on Tensors, recordable on a gradient Tape;
* array mode: the raw ndarray kernels, used for inference and for the
  finite-difference replay harness (which additionally supports per-sample
  parameter overrides and replay from an arbitrary step index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import ConvParams, Tensor


@dataclass(frozen=True)
class Step:
    """One primitive op: reads input slots, writes one output slot."""

    kind: str  # conv | relu | pool | upsample | sum | sigmoid | concat
    inputs: tuple
    output: str
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ParamSpec:
    """Declaration of one learnable tensor; materialized by init_params."""

    name: str
    shape: tuple
    init: str = "he"  # he | zero | const
    const: float = 0.0


def conv_step(in_slot, out_slot, weight, bias, stride=1, padding=0, dilation=1):
    return Step("conv", (in_slot,), out_slot,
                {"weight": weight, "bias": bias, "stride": stride,
                 "padding": padding, "dilation": dilation})


def init_params(param_specs, seed):
    """Materialize parameters in declaration order with a Philox stream.

    He (fan-in) init for conv weights, zeros for biases, constants where a
    spec pins the value (decoder fusion weights). Deterministic in seed.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    params: dict[str, Tensor] = {}
    for ps in param_specs:
        if ps.name in params:
            raise ValueError(f"duplicate parameter name {ps.name}")
        if ps.init == "he":
            fan_in = int(np.prod(ps.shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            data = rng.normal(0.0, std, size=ps.shape)
        elif ps.init == "zero":
            data = np.zeros(ps.shape)
        elif ps.init == "const":
            data = np.full(ps.shape, ps.const)
        else:
            raise ValueError(f"unknown init kind {ps.init}")
        params[ps.name] = Tensor(data, requires_grad=True)
    return params


def _conv_params(step, params):
    w = params[step.attrs["weight"]]
    bname = step.attrs["bias"]
    b = params[bname] if bname is not None else None
    return ConvParams(
        out_channels=w.shape[0],
        kernel=w.shape[2],
        stride=step.attrs["stride"],
        padding=step.attrs["padding"],
        dilation=step.attrs["dilation"],
        weights=w,
        bias=b,
    )


def run_tensor(steps, params, env):
    """Execute steps with engine ops. ``env`` maps slot -> Tensor and is
    mutated in place; returns it."""
    for step in steps:
        ins = [env[s] for s in step.inputs]
        if step.kind == "conv":
            out = engine.conv2d(ins[0], _conv_params(step, params))
        elif step.kind == "relu":
            out = engine.relu(ins[0])
        elif step.kind == "pool":
            a = step.attrs
            out = engine.max_pool2d(ins[0], a["window"], a["stride"], a["padding"])
        elif step.kind == "upsample":
            out = engine.upsample_bilinear(ins[0], step.attrs["factor"])
        elif step.kind == "sum":
            out = engine.sum_n(ins)
        elif step.kind == "sigmoid":
            out = engine.sigmoid(ins[0])
        elif step.kind == "concat":
            out = engine.concat_channels(ins)
        else:
            raise ValueError(f"unknown step kind {step.kind}")
        env[step.output] = out
    return env


def run_arrays(steps, params, env, overrides=None, start=0):
    """Execute steps on raw ndarrays (no tape, no finite checks).

    ``overrides`` maps parameter name -> replacement array; a conv accepts a
    5-D (B,O,C,k,k) weight / 2-D (B,O) bias batch of per-sample parameters,
    letting one pass evaluate B perturbations of the same parameter. ``env``
    maps slot -> ndarray. Steps before ``start`` are assumed cached in env.
    """
    overrides = overrides or {}
    for step in steps[start:]:
        ins = [env[s] for s in step.inputs]
        a = step.attrs
        if step.kind == "conv":
            w = overrides.get(a["weight"])
            if w is None:
                w = params[a["weight"]].data
            b = None
            if a["bias"] is not None:
                b = overrides.get(a["bias"])
                if b is None:
                    b = params[a["bias"]].data.reshape(-1)
            out = engine.conv2d_kernel(ins[0], w, b, a["stride"], a["padding"], a["dilation"])
        elif step.kind == "relu":
            out = engine.relu_kernel(ins[0])
        elif step.kind == "pool":
            out, _ = engine.maxpool_kernel(ins[0], a["window"], a["stride"], a["padding"])
        elif step.kind == "upsample":
            f = a["factor"]
            h, w_ = ins[0].shape[2], ins[0].shape[3]
            out = engine.resize_bilinear_kernel(ins[0], h * f, w_ * f)
        elif step.kind == "sum":
            out = ins[0]
            for x in ins[1:]:
                out = out + x  # numpy broadcasting handles mixed batch sizes
        elif step.kind == "sigmoid":
            out = engine.sigmoid_kernel(ins[0])
        elif step.kind == "concat":
            batch = max(x.shape[0] for x in ins)
            ins = [np.broadcast_to(x, (batch,) + x.shape[1:]) if x.shape[0] != batch else x
                   for x in ins]
            out = np.concatenate(ins, axis=1)
        else:
            raise ValueError(f"unknown step kind {step.kind}")
        env[step.output] = out
    return env


def first_step_using(steps, param_names):
    """Index of the first step that reads any of the given parameters."""
    names = set(param_names)
    for i, step in enumerate(steps):
        if step.kind == "conv" and (step.attrs["weight"] in names or step.attrs["bias"] in names):
            return i
    return len(steps)
