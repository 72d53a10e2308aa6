"""Shared helpers: cascade fuzzing for the validator property tests."""

import numpy as np

from pixelcascade import cascade
from pixelcascade.cascade import CascadeSpec, EncoderSpec, TransitionNodeSpec


def make_fuzz_spec(rng, width_scale=1 / 16):
    """A random valid cascade spec (small channel widths, 1-3 encoders).

    E1 is guaranteed to contain a node at level >= 2, so every fuzzed spec
    has room for a shallower-edge mutation.
    """
    task = rng.choice(["saliency", "edge", "skeleton"])
    base = cascade.preset_pattern(task, width_scale=width_scale)
    side_levels = sorted(sp.level for sp in base.side_paths)

    n_enc = int(rng.integers(1, 4))
    encoders = []
    prev_levels = side_levels
    for k in range(1, n_enc + 1):
        max_level = max(prev_levels)
        candidates = list(range(1, max_level + 1))
        size = int(rng.integers(1, min(4, len(candidates)) + 1))
        levels = sorted(rng.choice(candidates, size=size, replace=False).tolist())
        if k == 1 and all(lv < 2 for lv in levels) and max_level >= 2:
            levels = sorted(set(levels + [int(rng.integers(2, max_level + 1))]))
        nodes = []
        for m in levels:
            avail = [l for l in prev_levels if l >= m]
            take = int(rng.integers(1, len(avail) + 1))
            ins = tuple(sorted(rng.choice(avail, size=take, replace=False).tolist()))
            nodes.append(TransitionNodeSpec(
                encoder=k, level=m, inputs=ins,
                channels=int(rng.integers(1, 7)),
                identity_path=bool(rng.integers(0, 2)),
            ))
        encoders.append(EncoderSpec(index=k, nodes=tuple(nodes)))
        prev_levels = levels

    spec = CascadeSpec(
        task=task,
        backbone=base.backbone,
        side_paths=base.side_paths,
        encoders=tuple(encoders),
        decoder="topdown",
        route_uncovered=bool(rng.integers(0, 2)),
    )
    if len(cascade.decoder_consumes(spec)) >= 2 and rng.integers(0, 2):
        spec = CascadeSpec(task=spec.task, backbone=spec.backbone,
                           side_paths=spec.side_paths, encoders=spec.encoders,
                           decoder="side_supervision",
                           route_uncovered=spec.route_uncovered)
    return spec


def add_shallower_edge(spec, rng):
    """Mutate one E1 node to consume a producer shallower than itself.

    Returns (mutated_spec, expected_violation_substring).
    """
    e1 = spec.encoders[0]
    targets = [n for n in e1.nodes if n.level >= 2]
    node = targets[int(rng.integers(0, len(targets)))]
    shallow = int(rng.integers(1, node.level))
    new_inputs = tuple(sorted(set(node.inputs) | {shallow}))
    new_nodes = tuple(
        TransitionNodeSpec(n.encoder, n.level, new_inputs, n.channels, n.identity_path)
        if n is node else n
        for n in e1.nodes
    )
    new_encoders = (EncoderSpec(index=1, nodes=new_nodes),) + spec.encoders[1:]
    mutated = CascadeSpec(task=spec.task, backbone=spec.backbone,
                          side_paths=spec.side_paths, encoders=new_encoders,
                          decoder=spec.decoder, route_uncovered=spec.route_uncovered)
    edge_name = f"E0.L{shallow}->E1.L{node.level}"
    return mutated, edge_name
