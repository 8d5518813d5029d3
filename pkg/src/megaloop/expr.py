"""A small expression language for constraints, rule conditions and view derivations.

Expressions use Python syntax but only a whitelisted subset is interpreted:
literals, names, attribute navigation, comparisons, boolean and arithmetic
operators, conditional expressions, generator expressions and a fixed set
of functions (``count``, ``sum``, ``min``, ``max``, ``len``, ``abs``,
``any``, ``all``, ``round`` plus whatever the caller binds).

    >>> evaluate("count(x for x in xs if x > 1) <= limit", {"xs": [1, 2, 3], "limit": 2})
    True
"""
from __future__ import annotations

import ast
import functools
import operator
from typing import Any, Mapping

from .model import Element, Metamodel, TypedModel


class ExpressionError(Exception):
    pass


_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.FloorDiv: operator.floordiv, ast.Mod: operator.mod,
}
_CMPOPS = {
    ast.Eq: operator.eq, ast.NotEq: operator.ne, ast.Lt: operator.lt, ast.LtE: operator.le,
    ast.Gt: operator.gt, ast.GtE: operator.ge,
    ast.In: lambda a, b: a in b, ast.NotIn: lambda a, b: a not in b,
    ast.Is: operator.is_, ast.IsNot: operator.is_not,
}


def _count(items) -> int:
    return len(list(items))


BUILTINS: dict[str, Any] = {
    "count": _count, "sum": sum, "min": min, "max": max, "len": len, "abs": abs,
    "any": any, "all": all, "round": round, "True": True, "False": False, "None": None,
}

_ALLOWED = (
    ast.Expression, ast.BoolOp, ast.And, ast.Or, ast.UnaryOp, ast.Not, ast.USub, ast.UAdd,
    ast.BinOp, ast.Compare, ast.Constant, ast.Name, ast.Load, ast.Attribute, ast.Call,
    ast.IfExp, ast.GeneratorExp, ast.ListComp, ast.comprehension, ast.List, ast.Tuple, ast.Store,
    *_BINOPS, *_CMPOPS,
)


@functools.lru_cache(maxsize=1024)
def compile_expr(source: str) -> ast.Expression:
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"syntax error in {source!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ExpressionError(f"{type(node).__name__} not allowed in {source!r}")
        if isinstance(node, ast.Attribute) and node.attr.startswith("_"):
            raise ExpressionError(f"private attribute {node.attr!r} in {source!r}")
        if isinstance(node, ast.Call) and (node.keywords or not isinstance(node.func, ast.Name)):
            raise ExpressionError(f"only plain calls of named functions in {source!r}")
    return tree


class ElementRef:
    """Read-only view of a model element for expression evaluation.

    Attribute access yields attribute values, or linked elements for
    references (a single element or ``None`` when the upper bound is 1).
    """

    __slots__ = ("_model", "_mm", "_element")

    def __init__(self, model: TypedModel, element: Element, mm: Metamodel | None = None):
        self._model = model
        self._mm = mm
        self._element = element

    @property
    def id(self) -> str:
        return self._element.id

    @property
    def type(self) -> str:
        return self._element.type

    def __getattr__(self, name: str) -> Any:
        e = self._element
        if name in e.attrs:
            return e.attrs[name]
        et = self._mm.type(e.type) if self._mm is not None else None
        ref = et.reference(name) if et is not None else None
        if name in e.links or ref is not None:
            targets = [ElementRef(self._model, self._model[t], self._mm)
                       for t in e.links.get(name, ()) if t in self._model]
            if ref is not None and ref.upper == 1:
                return targets[0] if targets else None
            return targets
        if et is not None and et.attribute(name) is not None:
            return None
        if et is None:
            return None
        raise AttributeError(f"{e.type} has no feature {name!r}")

    def __eq__(self, other) -> bool:
        return isinstance(other, ElementRef) and other._element.id == self._element.id

    def __hash__(self) -> int:
        return hash(self._element.id)

    def __repr__(self) -> str:
        return f"<{self._element.type} {self._element.id}>"


def model_scope(model: TypedModel, mm: Metamodel | None = None, prefix: str = "elements") -> dict:
    """Bindings that expose ``prefix(typeName)`` over ``model``."""
    def elements(type_name: str | None = None) -> list[ElementRef]:
        return [ElementRef(model, e, mm) for e in model if type_name is None or e.type == type_name]
    return {prefix: elements}


def evaluate(source: str, names: Mapping[str, Any]) -> Any:
    tree = compile_expr(source)
    try:
        return _Eval(names).visit(tree.body)
    except ExpressionError:
        raise
    except Exception as exc:
        raise ExpressionError(f"{source!r}: {type(exc).__name__}: {exc}") from None


class _Eval:
    def __init__(self, names: Mapping[str, Any]):
        self.scopes: list[Mapping[str, Any]] = [BUILTINS, names]

    def lookup(self, name: str) -> Any:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        raise ExpressionError(f"unknown name {name!r}")

    def visit(self, node: ast.AST) -> Any:
        return getattr(self, "visit_" + type(node).__name__)(node)

    def visit_Constant(self, node):
        return node.value

    def visit_Name(self, node):
        return self.lookup(node.id)

    def visit_Attribute(self, node):
        value = self.visit(node.value)
        if value is None:
            return None
        if isinstance(value, ElementRef):
            return getattr(value, node.attr)
        if isinstance(value, Mapping):
            return value.get(node.attr)
        raise ExpressionError(f"cannot navigate .{node.attr} on {type(value).__name__}")

    def visit_BoolOp(self, node):
        if isinstance(node.op, ast.And):
            result = True
            for v in node.values:
                result = self.visit(v)
                if not result:
                    return result
            return result
        result = False
        for v in node.values:
            result = self.visit(v)
            if result:
                return result
        return result

    def visit_UnaryOp(self, node):
        v = self.visit(node.operand)
        if isinstance(node.op, ast.Not):
            return not v
        if isinstance(node.op, ast.USub):
            return -v
        return +v

    def visit_BinOp(self, node):
        return _BINOPS[type(node.op)](self.visit(node.left), self.visit(node.right))

    def visit_Compare(self, node):
        left = self.visit(node.left)
        for op, comp in zip(node.ops, node.comparators):
            right = self.visit(comp)
            if not _CMPOPS[type(op)](left, right):
                return False
            left = right
        return True

    def visit_IfExp(self, node):
        return self.visit(node.body) if self.visit(node.test) else self.visit(node.orelse)

    def visit_Call(self, node):
        fn = self.lookup(node.func.id)
        if not callable(fn):
            raise ExpressionError(f"{node.func.id!r} is not a function")
        return fn(*[self.visit(a) for a in node.args])

    def visit_List(self, node):
        return [self.visit(e) for e in node.elts]

    def visit_Tuple(self, node):
        return tuple(self.visit(e) for e in node.elts)

    def _comprehend(self, generators, element):
        def rec(i: int):
            if i == len(generators):
                yield self.visit(element)
                return
            gen = generators[i]
            if not isinstance(gen.target, ast.Name):
                raise ExpressionError("comprehension targets must be plain names")
            for item in list(self.visit(gen.iter)):
                self.scopes.append({gen.target.id: item})
                try:
                    if all(self.visit(cond) for cond in gen.ifs):
                        yield from rec(i + 1)
                finally:
                    self.scopes.pop()
        return list(rec(0))

    def visit_GeneratorExp(self, node):
        return self._comprehend(node.generators, node.elt)

    def visit_ListComp(self, node):
        return self._comprehend(node.generators, node.elt)

