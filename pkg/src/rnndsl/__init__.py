"""Recurrent-cell architecture DSL and automated architecture search."""

from .dsl import (
    Architecture,
    ArchNode,
    OpKind,
    ParseError,
    analyze,
    builtin,
    canonicalize,
    enumerate_ct_taps,
    parse,
    render,
)

__all__ = [
    "Architecture",
    "ArchNode",
    "OpKind",
    "ParseError",
    "analyze",
    "builtin",
    "canonicalize",
    "enumerate_ct_taps",
    "parse",
    "render",
]
