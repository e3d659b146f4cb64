"""Bundled JSON schemas for every document the package writes or reads."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from daef.errors import SchemaError

SCHEMAS = ("model", "eval_report", "packet")


@lru_cache(maxsize=None)
def _validator(name: str) -> jsonschema.protocols.Validator:
    text = (resources.files("daef.resources") / "schemas" / f"{name}.schema.json").read_text("utf-8")
    schema = json.loads(text)
    cls = jsonschema.validators.validator_for(schema)
    return cls(schema)


def load_schema(name: str) -> dict:
    return _validator(name).schema


def validate(doc: dict, name: str) -> None:
    """Raise :class:`SchemaError` naming the first violation in ``doc``."""
    if name not in SCHEMAS:
        raise KeyError(f"unknown schema {name!r}")
    error = jsonschema.exceptions.best_match(_validator(name).iter_errors(doc))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise SchemaError(f"{name} document invalid at {where}: {error.message}")
