"""Line-oriented config files: `[section]` headers, `key = value`, `#` comments.

The same reader/writer pair serves cascade spec files and the resolved-run
snapshots the command line writes. Spec files are exact: parsing the output
of `spec_to_text` reproduces the original CascadeSpec value.
"""

from __future__ import annotations

from . import backbone as bb
from .cascade import (CascadeSpec, EncoderSpec, SidePathSpec,
                      TransitionNodeSpec)


def parse_text(text: str) -> dict:
    """Sections in file order, each a key->string dict in file order."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ValueError(f"line {lineno}: empty section name")
            current = sections.setdefault(name, {})
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ValueError(f"line {lineno}: key before any [section]")
        key = key.strip()
        if key in current:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return sections


def format_text(sections: dict) -> str:
    chunks = []
    for name, entries in sections.items():
        lines = [f"[{name}]"]
        lines += [f"{key} = {value}" for key, value in entries.items()]
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ValueError(f"{key}: expected true/false, got {value!r}")


def _parse_int_tuple(value: str) -> tuple:
    return tuple(int(part) for part in value.split(",") if part.strip())


# Cascade spec files -----------------------------------------------------------


def spec_to_sections(spec: CascadeSpec) -> dict:
    if spec.backbone != bb.build_backbone(spec.task, spec.backbone.width_scale):
        raise ValueError("only task-preset backbones can be written to a spec file")
    sections = {"model": {
        "task": spec.task,
        "width_scale": repr(spec.backbone.width_scale),
        "decoder": spec.decoder,
        "route_uncovered": "true" if spec.route_uncovered else "false",
    }}
    side = {}
    for sp in spec.side_paths:
        side[f"level{sp.level}.stride"] = str(sp.stride)
        side[f"level{sp.level}.channels"] = str(sp.channels)
        side[f"level{sp.level}.pre_convs"] = str(sp.pre_convs)
    sections["side_paths"] = side
    enc = {}
    for e in spec.encoders:
        for node in e.nodes:
            stem = f"E{e.index}.node{node.level}"
            enc[f"{stem}.inputs"] = ",".join(str(v) for v in node.inputs)
            enc[f"{stem}.channels"] = str(node.channels)
            enc[f"{stem}.identity_path"] = ("true" if node.identity_path
                                            else "false")
    sections["encoders"] = enc
    return sections


def spec_to_text(spec: CascadeSpec) -> str:
    return format_text(spec_to_sections(spec))


def _require(section: dict, key: str, where: str) -> str:
    if key not in section:
        raise ValueError(f"missing key {key!r} in [{where}]")
    return section[key]


def spec_from_sections(sections: dict) -> CascadeSpec:
    if "model" not in sections:
        raise ValueError("missing [model] section")
    model = sections["model"]
    task = _require(model, "task", "model")
    width_scale = float(_require(model, "width_scale", "model"))
    decoder = _require(model, "decoder", "model")
    route = _parse_bool(model.get("route_uncovered", "false"), "route_uncovered")

    side_paths = []
    side = sections.get("side_paths", {})
    levels = sorted({key.split(".")[0] for key in side})
    for stem in levels:
        if not stem.startswith("level") or not stem[5:].isdigit():
            raise ValueError(f"bad side-path key prefix {stem!r}")
        level = int(stem[5:])
        side_paths.append(SidePathSpec(
            level=level,
            stride=int(_require(side, f"{stem}.stride", "side_paths")),
            channels=int(_require(side, f"{stem}.channels", "side_paths")),
            pre_convs=int(_require(side, f"{stem}.pre_convs", "side_paths")),
        ))

    enc_section = sections.get("encoders", {})
    by_encoder: dict = {}
    for key in enc_section:
        parts = key.split(".")
        if (len(parts) != 3 or not parts[0].startswith("E")
                or not parts[0][1:].isdigit()
                or not parts[1].startswith("node")
                or not parts[1][4:].isdigit()):
            raise ValueError(f"bad encoder key {key!r}; "
                             "expected E<k>.node<m>.<field>")
        by_encoder.setdefault(int(parts[0][1:]), set()).add(int(parts[1][4:]))
    encoders = []
    for index in sorted(by_encoder):
        nodes = []
        for level in sorted(by_encoder[index]):
            stem = f"E{index}.node{level}"
            nodes.append(TransitionNodeSpec(
                encoder=index,
                level=level,
                inputs=_parse_int_tuple(
                    _require(enc_section, f"{stem}.inputs", "encoders")),
                channels=int(
                    _require(enc_section, f"{stem}.channels", "encoders")),
                identity_path=_parse_bool(
                    enc_section.get(f"{stem}.identity_path", "false"),
                    f"{stem}.identity_path"),
            ))
        encoders.append(EncoderSpec(index=index, nodes=tuple(nodes)))

    return CascadeSpec(
        task=task,
        backbone=bb.build_backbone(task, width_scale),
        side_paths=tuple(side_paths),
        encoders=tuple(encoders),
        decoder=decoder,
        route_uncovered=route,
    )


def spec_from_text(text: str) -> CascadeSpec:
    return spec_from_sections(parse_text(text))


def save_spec(spec: CascadeSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(spec_to_text(spec))


def load_spec(path) -> CascadeSpec:
    with open(path) as fh:
        return spec_from_text(fh.read())
