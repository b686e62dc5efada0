"""Loop-IR query compiler: SQL subset -> order-free loop nests ->
compiler-transformation pipeline -> concretized execution, with a naive
oracle evaluator as the semantic ground truth."""

from .ir import Program, emit_text, structural_eq, validate
from .parser import parse_text

__all__ = ["Program", "emit_text", "structural_eq", "validate", "parse_text"]
