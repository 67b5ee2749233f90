"""Text schema for concrete architectures.

The format is line-oriented and versioned::

    architecture 1
    task translation
    note source-resolution 256x256
    provenance seed 7
    layer stem0 conv7x7 64
    layer b1 ResBlock 256
    ...

``note`` and ``provenance`` lines are optional; ``layer`` lines list every
slot in order as ``layer <id> <op> <width>``. Parsing then serializing (or
the reverse) is lossless.
"""

from __future__ import annotations

from .search_space import (
    ArchLayer,
    Architecture,
    SearchSpaceError,
    SupernetSpec,
    validate_architecture,
)

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def export_architecture(arch: Architecture) -> str:
    lines = [f"architecture {SCHEMA_VERSION}", f"task {arch.task}"]
    if arch.resolution_note:
        lines.append(f"note source-resolution {arch.resolution_note}")
    for key, value in arch.provenance:
        _check_token(key)
        _check_token(value)
        lines.append(f"provenance {key} {value}")
    for layer in arch.layers:
        _check_token(layer.layer_id)
        _check_token(layer.op)
        lines.append(f"layer {layer.layer_id} {layer.op} {layer.width}")
    return "\n".join(lines) + "\n"


def import_architecture(text: str, spec: SupernetSpec | None = None) -> Architecture:
    """Parse schema text; when a layout is given, validate against it."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise SchemaError("empty architecture file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "architecture":
        raise SchemaError("missing 'architecture <version>' header")
    if int(head[1]) != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {head[1]}")
    task = None
    note = ""
    provenance: list[tuple[str, str]] = []
    layers: list[ArchLayer] = []
    for line in lines[1:]:
        fields = line.split()
        keyword = fields[0]
        if keyword == "task":
            if len(fields) != 2:
                raise SchemaError(f"malformed task line: {line!r}")
            task = fields[1]
        elif keyword == "note":
            if len(fields) != 3 or fields[1] != "source-resolution":
                raise SchemaError(f"malformed note line: {line!r}")
            note = fields[2]
        elif keyword == "provenance":
            if len(fields) != 3:
                raise SchemaError(f"malformed provenance line: {line!r}")
            provenance.append((fields[1], fields[2]))
        elif keyword == "layer":
            if len(fields) != 4:
                raise SchemaError(f"malformed layer line: {line!r}")
            try:
                width = int(fields[3])
            except ValueError:
                raise SchemaError(f"non-integer width in line: {line!r}") from None
            layers.append(ArchLayer(fields[1], fields[2], width))
        else:
            raise SchemaError(f"unknown keyword {keyword!r}")
    if task is None:
        raise SchemaError("missing task line")
    if task not in ("translation", "super_resolution"):
        raise SchemaError(f"unknown task {task!r}")
    if not layers:
        raise SchemaError("architecture lists no layers")
    arch = Architecture(
        task=task, layers=tuple(layers), resolution_note=note, provenance=tuple(provenance)
    )
    if spec is not None:
        try:
            validate_architecture(arch, spec)
        except SearchSpaceError as exc:
            raise SchemaError(str(exc)) from exc
    return arch


def _check_token(token: str) -> None:
    if not token or any(ch.isspace() for ch in token):
        raise SchemaError(f"token {token!r} is empty or contains whitespace")
