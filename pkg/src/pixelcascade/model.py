"""Whole-network assembly: trunk, side paths, transition nodes, decoder.

A compiled cascade spec is lowered here into one flat micro program whose
steps can run either through the autodiff engine (``forward``) or directly
on arrays (``forward_arrays``), sharing the same kernels and parameters.
"""

from __future__ import annotations

import numpy as np

from . import cascade, decoders, program
from .cascade import CascadeSpec, DecoderStep, NodeStep, SidePathStep
from .decoders import DecoderOutputs
from .engine import Tensor
from .program import ParamSpec, Step, conv_step

from . import backbone as bb


def side_path_steps(spec: CascadeSpec, sp: SidePathStep, block_slot: str,
                    block_channels: int):
    """Steps and params for one side path; returns (steps, specs, out_slot).

    Zero pre-convs means a raw tap: the block slot is used as-is.
    """
    if sp.pre_convs == 0:
        return [], [], block_slot
    steps = []
    specs = []
    cur = block_slot
    in_ch = block_channels
    for j in range(1, sp.pre_convs + 1):
        wname = f"side{sp.level}.pre{j}.w"
        bname = f"side{sp.level}.pre{j}.b"
        specs.append(ParamSpec(wname, (sp.channels, in_ch, 3, 3), "he"))
        specs.append(ParamSpec(bname, (1, sp.channels, 1, 1), "zero"))
        conv_out = f"side{sp.level}.pre{j}.conv"
        steps.append(conv_step(cur, conv_out, wname, bname, padding=1))
        cur = f"side{sp.level}.pre{j}"
        steps.append(Step("relu", (conv_out,), cur))
        in_ch = sp.channels
    return steps, specs, cur


def lower(spec: CascadeSpec):
    """Flatten a spec to (steps, param_specs, output_slots).

    ``output_slots`` carries the decoder slot names plus ``feature`` mapping
    (encoder, level) -> slot for every produced feature.
    """
    plan = cascade.compile(spec)
    steps, specs, block_slots = bb.backbone_steps(spec.backbone)
    slot_of = {}
    for pstep in plan.steps:
        if isinstance(pstep, SidePathStep):
            block_ch = spec.backbone.blocks[pstep.level - 1].channels
            s, p, out = side_path_steps(spec, pstep, block_slots[pstep.level - 1],
                                        block_ch)
            steps.extend(s)
            specs.extend(p)
            slot_of[(0, pstep.level)] = out
        elif isinstance(pstep, NodeStep):
            in_slots = {level: slot_of[(pstep.encoder - 1, level)]
                        for level, _, _ in pstep.inputs}
            out = f"E{pstep.encoder}.n{pstep.level}"
            s, p = cascade.node_steps(pstep, in_slots, out)
            steps.extend(s)
            specs.extend(p)
            slot_of[(pstep.encoder, pstep.level)] = out
        elif isinstance(pstep, DecoderStep):
            feature_slots = [slot_of[(enc, lvl)] for enc, lvl, _, _ in pstep.consumes]
            strides = [s for _, _, s, _ in pstep.consumes]
            channels = [c for _, _, _, c in pstep.consumes]
            if pstep.variant == "topdown":
                s, p, out_slots = decoders.topdown_steps(feature_slots, strides, channels)
            else:
                s, p, out_slots = decoders.side_supervision_steps(
                    feature_slots, strides, channels)
            steps.extend(s)
            specs.extend(p)
        else:
            raise TypeError(f"unknown plan step {pstep!r}")
    out_slots["feature"] = slot_of
    return steps, specs, out_slots


class CascadeModel:
    """A runnable network built from a cascade spec.

    Parameters are a flat name -> Tensor dict shared by both execution modes,
    so gradients from the tape apply directly to what the kernels run on.
    """

    def __init__(self, spec: CascadeSpec, seed: int = 0):
        self.spec = spec
        self.steps, self.param_specs, self.output_slots = lower(spec)
        self.params = program.init_params(self.param_specs, seed)

    @property
    def decoder_variant(self) -> str:
        return self.spec.decoder

    def param_count(self) -> int:
        return sum(int(np.prod(ps.shape)) for ps in self.param_specs)

    def feature_slot(self, encoder: int, level: int) -> str:
        return self.output_slots["feature"][(encoder, level)]

    def _check_image(self, shape):
        if len(shape) != 4 or shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) image batch, got {shape}")
        if shape[2] % 16 or shape[3] % 16:
            raise ValueError(
                f"input spatial size {shape[2]}x{shape[3]} must be divisible by 16"
            )

    def forward(self, image: Tensor) -> DecoderOutputs:
        """Tensor-mode forward; record on the ambient tape if one is active."""
        self._check_image(image.shape)
        env = {"image": image}
        program.run_tensor(self.steps, self.params, env)
        s = self.output_slots
        return DecoderOutputs(
            prob=env[s["prob"]],
            logits=env[s["logits"]],
            side_probs=[env[k] for k in s["side_probs"]],
            side_logits=[env[k] for k in s["side_logits"]],
        )

    def forward_arrays(self, image=None, env=None, overrides=None, start=0):
        """Kernel-mode forward on raw arrays; returns the full slot env.

        ``env``/``start`` allow replaying only a suffix of the program on top
        of cached activations; ``overrides`` maps parameter names to
        per-sample stacked values (5-D weights, 2-D biases).
        """
        if env is None:
            self._check_image(image.shape)
            env = {"image": np.asarray(image, dtype=np.float64)}
        elif image is not None:
            env["image"] = np.asarray(image, dtype=np.float64)
        program.run_arrays(self.steps, self.params, env, overrides=overrides,
                           start=start)
        return env

    def predict(self, image) -> np.ndarray:
        """Probability map for an (N,3,H,W) array, kernel mode."""
        env = self.forward_arrays(image)
        return env[self.output_slots["prob"]]

    def outputs_from_env(self, env):
        """Read decoder outputs (as arrays) out of a forward_arrays env."""
        s = self.output_slots
        return {
            "prob": env[s["prob"]],
            "logits": env[s["logits"]],
            "side_probs": [env[k] for k in s["side_probs"]],
            "side_logits": [env[k] for k in s["side_logits"]],
        }


def preset_model(task: str, width_scale: float = 0.125, num_encoders: int = 2,
                 seed: int = 0, include_conv5: bool = True) -> CascadeModel:
    spec = cascade.preset_pattern(task, width_scale=width_scale,
                                  num_encoders=num_encoders,
                                  include_conv5=include_conv5)
    return CascadeModel(spec, seed=seed)
