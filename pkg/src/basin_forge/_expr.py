"""Tiny expression compiler for planar field components.

Accepts the grammar +, -, *, /, pow (** or ^), sin, cos, exp over constants
and the variables x, y.  Produces stack programs for the backend evaluator
plus symbolically differentiated programs for the Jacobian, so a field
defined by strings still has an analytic derivative.
"""

import ast

import numpy as np

from . import _backend as _b

_K = _b.kernels

_FUNCS = ("sin", "cos", "exp")

# tree nodes: ("const", v) ("x",) ("y",) ("neg", a) (fn, a) for fn in _FUNCS,
# ("add"|"sub"|"mul"|"div", a, b), ("powi", a, n), ("pow", a, b)


class ExprError(ValueError):
    pass


def _convert(node):
    if isinstance(node, ast.Expression):
        return _convert(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return ("const", float(node.value))
        raise ExprError(f"non-numeric constant {node.value!r}")
    if isinstance(node, ast.Name):
        if node.id in ("x", "y"):
            return (node.id,)
        raise ExprError(f"unknown name {node.id!r} (only x, y)")
    if isinstance(node, ast.UnaryOp):
        inner = _convert(node.operand)
        if isinstance(node.op, ast.USub):
            return ("neg", inner)
        if isinstance(node.op, ast.UAdd):
            return inner
        raise ExprError("unsupported unary operator")
    if isinstance(node, ast.BinOp):
        a = _convert(node.left)
        b = _convert(node.right)
        if isinstance(node.op, ast.Add):
            return ("add", a, b)
        if isinstance(node.op, ast.Sub):
            return ("sub", a, b)
        if isinstance(node.op, ast.Mult):
            return ("mul", a, b)
        if isinstance(node.op, ast.Div):
            return ("div", a, b)
        if isinstance(node.op, ast.Pow):
            if b[0] == "const" and float(b[1]) == int(b[1]) and abs(b[1]) <= 64:
                return ("powi", a, int(b[1]))
            return ("pow", a, b)
        raise ExprError("unsupported binary operator")
    if isinstance(node, ast.Call):
        if (isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and len(node.args) == 1 and not node.keywords):
            return (node.func.id, _convert(node.args[0]))
        raise ExprError("only sin, cos, exp calls are allowed")
    raise ExprError(f"unsupported syntax {ast.dump(node)}")


def parse(src):
    """Parse a component expression into the internal tree."""
    try:
        tree = ast.parse(str(src).replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"bad expression {src!r}: {exc}") from exc
    return _convert(tree)


def _is_const(t, v=None):
    return t[0] == "const" and (v is None or t[1] == v)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ("const", 0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return ("const", a[1] * b[1])
    return ("mul", a, b)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return ("const", a[1] + b[1])
    return ("add", a, b)


def _sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return ("const", a[1] - b[1])
    if _is_const(a, 0.0):
        return ("neg", b)
    return ("sub", a, b)


def _neg(a):
    if _is_const(a):
        return ("const", -a[1])
    return ("neg", a)


def diff(tree, var):
    """Symbolic derivative with light constant folding."""
    head = tree[0]
    if head == "const":
        return ("const", 0.0)
    if head in ("x", "y"):
        return ("const", 1.0 if head == var else 0.0)
    if head == "neg":
        return _neg(diff(tree[1], var))
    if head == "add":
        return _add(diff(tree[1], var), diff(tree[2], var))
    if head == "sub":
        return _sub(diff(tree[1], var), diff(tree[2], var))
    if head == "mul":
        a, b = tree[1], tree[2]
        return _add(_mul(diff(a, var), b), _mul(a, diff(b, var)))
    if head == "div":
        a, b = tree[1], tree[2]
        num = _sub(_mul(diff(a, var), b), _mul(a, diff(b, var)))
        return ("div", num, ("powi", b, 2))
    if head == "powi":
        a, n = tree[1], tree[2]
        if n == 0:
            return ("const", 0.0)
        return _mul(_mul(("const", float(n)), ("powi", a, n - 1)), diff(a, var))
    if head == "pow":
        a, b = tree[1], tree[2]
        if not _is_const(b):
            raise ExprError("pow with variable exponent is not differentiable here")
        c = b[1]
        return _mul(_mul(("const", c), ("pow", a, ("const", c - 1.0))),
                    diff(a, var))
    if head == "sin":
        return _mul(("cos", tree[1]), diff(tree[1], var))
    if head == "cos":
        return _neg(_mul(("sin", tree[1]), diff(tree[1], var)))
    if head == "exp":
        return _mul(tree, diff(tree[1], var))
    raise ExprError(f"cannot differentiate node {head!r}")


_OPC = {
    "add": _K.OP_ADD, "sub": _K.OP_SUB, "mul": _K.OP_MUL, "div": _K.OP_DIV,
    "sin": _K.OP_SIN, "cos": _K.OP_COS, "exp": _K.OP_EXP,
}


def _depth(t):
    head = t[0]
    if head in ("const", "x", "y"):
        return 1
    if head in ("neg", "powi") or head in _FUNCS:
        return _depth(t[1])
    return max(_depth(t[1]), 1 + _depth(t[2]))


def compile_tree(tree, consts):
    """Flatten a tree to (ops, args) postfix arrays; consts list is shared."""
    if _depth(tree) > 60:  # compiled evaluator uses a fixed 64-slot stack
        raise ExprError("expression nests too deeply")
    ops = []
    args = []

    def emit(t):
        head = t[0]
        if head == "const":
            try:
                idx = consts.index(t[1])
            except ValueError:
                idx = len(consts)
                consts.append(t[1])
            ops.append(_K.OP_CONST)
            args.append(float(idx))
        elif head == "x":
            ops.append(_K.OP_X)
            args.append(0.0)
        elif head == "y":
            ops.append(_K.OP_Y)
            args.append(0.0)
        elif head == "neg":
            emit(t[1])
            ops.append(_K.OP_NEG)
            args.append(0.0)
        elif head == "powi":
            emit(t[1])
            ops.append(_K.OP_POWI)
            args.append(float(t[2]))
        elif head == "pow":
            emit(t[1])
            emit(t[2])
            ops.append(_K.OP_POW)
            args.append(0.0)
        elif head in ("add", "sub", "mul", "div"):
            emit(t[1])
            emit(t[2])
            ops.append(_OPC[head])
            args.append(0.0)
        elif head in _FUNCS:
            emit(t[1])
            ops.append(_OPC[head])
            args.append(0.0)
        else:
            raise ExprError(f"cannot compile node {head!r}")

    emit(tree)
    return np.asarray(ops, dtype=np.int32), np.asarray(args, dtype=float)


def build_programs(fx_src, fy_src):
    """Programs for (fx, fy) and the four Jacobian entries, plus consts."""
    tx = parse(fx_src)
    ty = parse(fy_src)
    consts = []
    progs = [compile_tree(tx, consts), compile_tree(ty, consts)]
    jac_progs = [compile_tree(diff(t, v), consts)
                 for t in (tx, ty) for v in ("x", "y")]
    return progs, jac_progs, np.asarray(consts, dtype=float)


def evaluate(src, x, y):
    """Direct evaluation of one expression (test and validation helper)."""
    consts = []
    ops, args = compile_tree(parse(src), consts)
    h = _K.make_field("expr", progs=[(ops, args), (ops, args)],
                      jac_progs=[(ops, args)] * 4,
                      consts=np.asarray(consts, dtype=float))
    return float(_K.field_eval(h, 0.0, np.array([float(x), float(y)]))[0])
