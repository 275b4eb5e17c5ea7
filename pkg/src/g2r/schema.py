"""Minimal declarative validation for YAML documents, with path and line context."""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from typing import Any, Callable

import yaml

from g2r.errors import G2RError


class ValidationError(G2RError):
    """Base for document errors; ``path`` is dotted with ``[i]`` list indices."""

    code = "invalid"

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        self.detail = message
        where = f"{path or '<root>'}" + (f" (line {line})" if line else "")
        super().__init__(f"{where}: {message}")
        self.errors = [self]

    def to_dict(self) -> dict:
        return {"code": self.code, "path": self.path, "line": self.line, "message": self.detail}


class YamlSyntax(ValidationError):
    code = "yaml_syntax"


class UnknownField(ValidationError):
    code = "unknown_field"

    def __init__(self, path, message, line=None, suggestion=None):
        super().__init__(path, message, line)
        self.suggestion = suggestion

    def to_dict(self):
        return {**super().to_dict(), "suggestion": self.suggestion}


class MissingRequired(ValidationError):
    code = "missing_required"


class RangeViolation(ValidationError):
    code = "range_violation"


def raise_all(errors: list[ValidationError]):
    if not errors:
        return
    first = errors[0]
    if len(errors) > 1:
        first.args = (first.args[0] + f" (and {len(errors) - 1} more: " + "; ".join(str(e) for e in errors[1:]) + ")",)
    first.errors = list(errors)
    raise first


def load_yaml(text) -> tuple[Any, dict]:
    """Parse one YAML document; returns ``(data, lines)`` with ``lines[path]`` 1-based."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise YamlSyntax("", f"not utf-8 text: {exc}") from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise YamlSyntax("", f"YAML syntax error: {problem}", line) from None
    except (ValueError, TypeError, RecursionError) as exc:  # e.g. unhashable keys, deep nesting
        raise YamlSyntax("", f"YAML error: {exc}") from None
    lines = {}
    if node is not None:
        _index_lines(node, "", lines, 0)
    return data, lines


def _index_lines(node, path, lines, depth):
    if depth > 200:
        return
    lines.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value if isinstance(k, yaml.ScalarNode) else "?"
            sub = f"{path}.{key}" if path else str(key)
            lines.setdefault(sub, k.start_mark.line + 1)
            _index_lines(v, sub, lines, depth + 1)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _index_lines(v, f"{path}[{i}]", lines, depth + 1)


@dataclass
class Field:
    """One expected value. ``kind`` is int, float, bool, str, map or list."""

    kind: str
    required: bool = False
    default: Any = None
    choices: tuple | None = None
    minimum: float | None = None
    maximum: float | None = None
    exclusive_min: bool = False
    children: dict | None = None  # map fields
    items: "Field | None" = None  # list fields
    check: Callable[[Any], str | None] | None = None
    doc: str = ""


_PY_TYPES = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,), "map": (dict,), "list": (list,)}


class Validator:
    def __init__(self, lines: dict | None = None):
        self.lines = lines or {}
        self.errors: list[ValidationError] = []
        self.defaults_applied: list[str] = []

    def line(self, path):
        return self.lines.get(path)

    def fail(self, cls, path, message, **kw):
        self.errors.append(cls(path, message, self.line(path), **kw))

    def map(self, value, schema: dict, path: str = "") -> dict:
        """Validate a mapping against ``schema``; fills defaults, collects errors."""
        if value is None:
            value = {}
        if not isinstance(value, dict):
            self.fail(RangeViolation, path, f"expected a mapping, got {type(value).__name__}")
            return {}
        out = {}
        for key in value:
            if key not in schema:
                sub = f"{path}.{key}" if path else str(key)
                near = difflib.get_close_matches(str(key), list(schema), n=1)
                hint = f"; did you mean {near[0]!r}?" if near else ""
                self.fail(UnknownField, sub, f"unknown field {key!r}{hint}", suggestion=near[0] if near else None)
        for key, spec in schema.items():
            sub = f"{path}.{key}" if path else key
            if key not in value or (value[key] is None and not (spec.kind == "map" and spec.children is not None)):
                if spec.required:
                    self.fail(MissingRequired, sub, "required field is missing")
                    continue
                if spec.kind == "map" and spec.children is not None:
                    out[key] = self.map({}, spec.children, sub)
                else:
                    out[key] = spec.default
                self.defaults_applied.append(sub)
                continue
            out[key] = self.value(value[key], spec, sub)
        return out

    def value(self, v, spec: Field, path: str):
        if spec.kind == "map" and spec.children is not None:
            return self.map(v, spec.children, path)
        types = _PY_TYPES[spec.kind]
        if not isinstance(v, types) or (spec.kind in ("int", "float") and isinstance(v, bool)):
            self.fail(RangeViolation, path, f"expected {spec.kind}, got {type(v).__name__} {v!r}")
            return spec.default
        if spec.kind == "float":
            v = float(v)
        if spec.choices is not None and v not in spec.choices:
            self.fail(RangeViolation, path, f"{v!r} is not one of {list(spec.choices)}")
            return spec.default
        if spec.minimum is not None and (v <= spec.minimum if spec.exclusive_min else v < spec.minimum):
            op = ">" if spec.exclusive_min else ">="
            self.fail(RangeViolation, path, f"{v!r} must be {op} {spec.minimum}")
            return spec.default
        if spec.maximum is not None and v > spec.maximum:
            self.fail(RangeViolation, path, f"{v!r} must be <= {spec.maximum}")
            return spec.default
        if spec.kind == "list" and spec.items is not None:
            v = [self.value(x, spec.items, f"{path}[{i}]") for i, x in enumerate(v)]
        if spec.check is not None:
            problem = spec.check(v)
            if problem:
                self.fail(RangeViolation, path, problem)
                return spec.default
        return v


def describe(schema: dict, prefix: str = "") -> list[tuple[str, str, str, str]]:
    """Flatten a schema into ``(path, kind, default, doc)`` rows for documentation."""
    rows = []
    for key, spec in schema.items():
        path = f"{prefix}.{key}" if prefix else key
        if spec.kind == "map" and spec.children is not None:
            rows.append((path, "map", "", spec.doc))
            rows.extend(describe(spec.children, path))
            continue
        rng = []
        if spec.choices:
            rng.append("one of " + ", ".join(map(str, spec.choices)))
        if spec.minimum is not None:
            rng.append((">" if spec.exclusive_min else ">=") + f" {spec.minimum}")
        if spec.maximum is not None:
            rng.append(f"<= {spec.maximum}")
        doc = "; ".join(filter(None, [spec.doc] + rng))
        rows.append((path, spec.kind, "required" if spec.required else repr(spec.default), doc))
    return rows
