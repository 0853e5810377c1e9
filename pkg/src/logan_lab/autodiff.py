"""Dense float64 expression graphs with source-to-source reverse-mode AD.

Expressions are immutable DAG nodes built with ordinary Python operators.
The backward sweep does not compute numbers; it emits *new* expression
nodes, so a gradient is itself an expression that can be evaluated or
differentiated again. ``gradient_expr`` wraps such a gradient in a
``gradient-of`` node, which is how the latent step of LOGAN stays
differentiable with respect to the network parameters.

Example::

    x = var("x", ())
    y = x * x * x
    dy = gradient_expr(y, "x")        # 3x^2, an expression
    gradient(dy, ["x"], {"x": 2.0})   # [array(12.)]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "UnboundError",
    "NonFiniteError",
    "NestingError",
    "MAX_ORDER",
    "Expr",
    "Program",
    "as_tensor",
    "var",
    "param",
    "const",
    "zeros",
    "matmul",
    "transpose",
    "expand",
    "sum_to",
    "total",
    "sum_axis",
    "mean",
    "leaky_relu",
    "relu",
    "clip",
    "stop_gradient",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sqrt",
    "power",
    "free_vars",
    "substitute",
    "evaluate",
    "gradient",
    "gradient_expr",
    "jacobian",
    "finite_difference",
]

# Gradient-of nodes may be nested once: the result of differentiating an
# expression that already contains one gradient-of node is the deepest
# derivative the engine will build.
MAX_ORDER = 2


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnboundError(AutodiffError, LookupError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class NestingError(AutodiffError):
    pass


def as_tensor(value) -> np.ndarray:
    """Copy ``value`` into a read-only float64 array, rejecting NaN/Inf."""
    arr = np.array(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# Op table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _OpDef:
    forward: Callable
    # vjp(node, adjoint) -> one adjoint Expr (or None) per argument
    vjp: Callable | None


_OPS: dict[str, _OpDef] = {}


def _register(name, forward, vjp=None):
    _OPS[name] = _OpDef(forward, vjp)


_ids = itertools.count()


class Expr:
    """One node of an expression graph.

    ``op`` is the node kind, ``args`` the operand nodes and ``attrs`` any
    static attributes. Shapes are inferred at construction, so shape errors
    surface where the graph is built rather than where it is run.
    """

    __slots__ = ("op", "args", "attrs", "shape", "order", "uid")
    __array_ufunc__ = None  # numpy defers to the reflected Expr operators

    def __init__(self, op, args=(), attrs=None, shape=(), order=None):
        self.op = op
        self.args = tuple(args)
        self.attrs = attrs or {}
        self.shape = tuple(shape)
        if order is None:
            order = max((a.order for a in self.args), default=0)
        self.order = order
        self.uid = next(_ids)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def __repr__(self):
        if self.op == "var":
            return f"Var({self.name!r}, shape={self.shape})"
        if self.op == "const":
            return f"Const(shape={self.shape})"
        return f"Expr({self.op}, shape={self.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return Expr("neg", (self,), shape=self.shape)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self) -> Expr:
        return transpose(self)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def var(name: str, shape=(), kind: str = "input") -> Expr:
    """A free identifier, bound through the evaluation environment."""
    if kind not in ("input", "parameter"):
        raise ValueError(f"unknown variable kind {kind!r}")
    return Expr("var", attrs={"name": name, "kind": kind}, shape=tuple(shape))


def param(name: str, shape=()) -> Expr:
    return var(name, shape, kind="parameter")


def const(value) -> Expr:
    arr = as_tensor(value)
    return Expr("const", attrs={"value": arr}, shape=arr.shape)


def zeros(shape) -> Expr:
    return const(np.zeros(shape))


def _is_const(e: Expr, fill: float | None = None) -> bool:
    if e.op != "const":
        return False
    return fill is None or bool(np.all(e.attrs["value"] == fill))


def _binary(op: str, a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape or b.shape == ():
        shape = a.shape
    elif a.shape == ():
        shape = b.shape
    else:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    # light folding keeps backward graphs small
    if op == "mul":
        if _is_const(a, 1.0) and shape == b.shape:
            return b
        if _is_const(b, 1.0) and shape == a.shape:
            return a
    if op == "add":
        if _is_const(a, 0.0) and shape == b.shape:
            return b
        if _is_const(b, 0.0) and shape == a.shape:
            return a
    return Expr(op, (a, b), shape=shape)


def _unbroadcast(adj: Expr, shape) -> Expr:
    if adj.shape == tuple(shape):
        return adj
    return sum_to(adj, shape)


_register("add", np.add, lambda n, g: (_unbroadcast(g, n.args[0].shape),
                                        _unbroadcast(g, n.args[1].shape)))
_register("sub", np.subtract, lambda n, g: (_unbroadcast(g, n.args[0].shape),
                                             _unbroadcast(-g, n.args[1].shape)))
_register("mul", np.multiply, lambda n, g: (_unbroadcast(g * n.args[1], n.args[0].shape),
                                             _unbroadcast(g * n.args[0], n.args[1].shape)))


def _div_vjp(n, g):
    a, b = n.args
    return (_unbroadcast(g / b, a.shape), _unbroadcast(-(g * n) / b, b.shape))


_register("div", np.divide, _div_vjp)
_register("neg", np.negative, lambda n, g: (-g,))


def matmul(a, b) -> Expr:
    a, b = _lift(a), _lift(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Expr("matmul", (a, b), shape=(a.shape[0], b.shape[1]))


_register("matmul", np.matmul, lambda n, g: (matmul(g, transpose(n.args[1])),
                                              matmul(transpose(n.args[0]), g)))


def transpose(x) -> Expr:
    x = _lift(x)
    if len(x.shape) != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return Expr("transpose", (x,), shape=x.shape[::-1])


_register("transpose", np.transpose, lambda n, g: (transpose(g),))


def _check_expandable(small, big, what):
    if small == ():
        return
    if len(small) != len(big) or any(s not in (1, t) for s, t in zip(small, big)):
        raise ShapeError(f"{what}: cannot map shape {small} onto {big}")


def expand(x, shape) -> Expr:
    """Explicit broadcast of size-1 axes (or a scalar) up to ``shape``."""
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    _check_expandable(x.shape, shape, "expand")
    if x.op == "const":
        return const(np.broadcast_to(x.attrs["value"], shape))
    return Expr("expand", (x,), attrs={"to": shape}, shape=shape)


_register("expand", lambda v, to: np.broadcast_to(v, to).copy(),
          lambda n, g: (sum_to(g, n.args[0].shape),))


def sum_to(x, shape) -> Expr:
    """Sum over axes so the result has ``shape`` (the adjoint of ``expand``)."""
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    _check_expandable(shape, x.shape, "sum_to")
    return Expr("sum_to", (x,), attrs={"to": shape}, shape=shape)


def _sum_to_fwd(v, to):
    if to == ():
        return np.asarray(v.sum())
    axes = tuple(i for i, (s, t) in enumerate(zip(to, v.shape)) if s == 1 and t != 1)
    return v.sum(axis=axes, keepdims=True)


_register("sum_to", _sum_to_fwd, lambda n, g: (expand(g, n.args[0].shape),))


def total(x) -> Expr:
    """Sum of all entries, as a scalar."""
    return sum_to(x, ())


def sum_axis(x, axis: int) -> Expr:
    x = _lift(x)
    shape = list(x.shape)
    shape[axis] = 1
    return sum_to(x, shape)


def mean(x) -> Expr:
    x = _lift(x)
    return total(x) * (1.0 / x.size)


def _unary(op, x, **attrs) -> Expr:
    x = _lift(x)
    return Expr(op, (x,), attrs=attrs, shape=x.shape)


def leaky_relu(x, slope: float = 0.2) -> Expr:
    return _unary("leaky_relu", x, slope=float(slope))


def relu(x) -> Expr:
    return leaky_relu(x, 0.0)


_register("leaky_relu", lambda v, slope: np.where(v > 0, v, slope * v),
          lambda n, g: (g * _unary("leaky_relu_slope", n.args[0], slope=n.attrs["slope"]),))
# derivative mask of leaky_relu; piecewise constant, so no derivative of its own
_register("leaky_relu_slope", lambda v, slope: np.where(v > 0, 1.0, slope), None)


def clip(x, lo: float = -1.0, hi: float = 1.0) -> Expr:
    return _unary("clip", x, lo=float(lo), hi=float(hi))


# derivative is 1 strictly inside (lo, hi) and 0 elsewhere, boundary included
_register("clip", lambda v, lo, hi: np.clip(v, lo, hi),
          lambda n, g: (g * _unary("clip_mask", n.args[0], **n.attrs),))
_register("clip_mask", lambda v, lo, hi: ((v > lo) & (v < hi)).astype(np.float64), None)


def stop_gradient(x) -> Expr:
    return _unary("stop_gradient", x)


_register("stop_gradient", lambda v: v, None)


def exp(x) -> Expr:
    return _unary("exp", x)


def log(x) -> Expr:
    return _unary("log", x)


def sin(x) -> Expr:
    return _unary("sin", x)


def cos(x) -> Expr:
    return _unary("cos", x)


def tanh(x) -> Expr:
    return _unary("tanh", x)


def sqrt(x) -> Expr:
    return _unary("sqrt", x)


def power(x, p: float) -> Expr:
    p = float(p)
    if p == 0.0:
        return const(np.ones(_lift(x).shape))
    if p == 1.0:
        return _lift(x)
    return _unary("power", x, p=p)


_register("exp", np.exp, lambda n, g: (g * n,))
_register("log", np.log, lambda n, g: (g / n.args[0],))
_register("sin", np.sin, lambda n, g: (g * cos(n.args[0]),))
_register("cos", np.cos, lambda n, g: (-(g * sin(n.args[0])),))
_register("tanh", np.tanh, lambda n, g: (g * (1.0 - n * n),))
_register("sqrt", np.sqrt, lambda n, g: (g * 0.5 / n,))
_register("power", lambda v, p: np.power(v, p),
          lambda n, g: (g * (n.attrs["p"] * power(n.args[0], n.attrs["p"] - 1.0)),))

# A gradient-of node aliases its expansion (the emitted backward graph);
# its derivative is the derivative of that expansion.
_register("grad", lambda v, **_: v, lambda n, g: (g,))


# --------------------------------------------------------------------------
# Graph utilities
# --------------------------------------------------------------------------


def _toposort(outputs: Iterable[Expr]) -> list[Expr]:
    seen: set[int] = set()
    order: list[Expr] = []
    for root in outputs:
        if root.uid in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for a in reversed(node.args):
                if a.uid not in seen:
                    stack.append((a, False))
    return order


def free_vars(expr: Expr | Sequence[Expr]) -> dict[str, tuple[int, ...]]:
    """Map of identifier name to declared shape for every free variable."""
    outputs = [expr] if isinstance(expr, Expr) else list(expr)
    found: dict[str, tuple[int, ...]] = {}
    for node in _toposort(outputs):
        if node.op == "var":
            prev = found.setdefault(node.name, node.shape)
            if prev != node.shape:
                raise ShapeError(f"identifier {node.name!r} declared with shapes {prev} and {node.shape}")
    return found


def _path_to(outputs: Sequence[Expr], target: Expr) -> str:
    """Readable op chain from an output down to ``target`` (for error messages)."""
    parents: dict[int, Expr] = {}
    for node in _toposort(outputs):
        for a in node.args:
            parents.setdefault(a.uid, node)
    chain = [target]
    while chain[-1].uid in parents:
        chain.append(parents[chain[-1].uid])
    return " <- ".join(n.op for n in chain)


def substitute(expr: Expr, replacements: Mapping[str, Expr]) -> Expr:
    """Rebuild ``expr`` with free identifiers replaced by expressions."""
    repl = {k: _lift(v) for k, v in replacements.items()}
    memo: dict[int, Expr] = {}
    for node in _toposort([expr]):
        if node.op == "var" and node.name in repl:
            new = repl[node.name]
            if new.shape != node.shape:
                raise ShapeError(f"substitute: {node.name!r} has shape {node.shape}, replacement {new.shape}")
        elif node.op in ("var", "const"):
            new = node
        else:
            args = tuple(memo[a.uid] for a in node.args)
            if all(x is y for x, y in zip(args, node.args)):
                new = node
            elif node.op == "grad":
                of = substitute(node.attrs["of"], repl)
                new = Expr("grad", args, attrs={"of": of, "wrt": node.attrs["wrt"]},
                           shape=node.shape, order=max(of.order + 1, args[0].order))
            else:
                new = Expr(node.op, args, attrs=node.attrs, shape=node.shape)
        memo[node.uid] = new
    return memo[expr.uid]


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


class Program:
    """A fixed set of output expressions, topologically sorted once.

    ``run`` can then be called many times with different environments, which
    is how the trainer replays one recorded training step per iteration.
    """

    def __init__(self, outputs: Sequence[Expr]):
        self.outputs = list(outputs)
        self.nodes = _toposort(self.outputs)
        pos = {n.uid: i for i, n in enumerate(self.nodes)}
        self._steps = []
        for n in self.nodes:
            if n.op in ("var", "const"):
                self._steps.append((n.op, n, None, None))
            else:
                attrs = {k: v for k, v in n.attrs.items() if k not in ("of", "wrt")}
                self._steps.append((_OPS[n.op].forward, n, tuple(pos[a.uid] for a in n.args), attrs))
        self._out = [pos[o.uid] for o in self.outputs]
        self.variables = free_vars(self.outputs)

    def run(self, env: Mapping[str, object]) -> list[np.ndarray]:
        with np.errstate(all="ignore"):  # non-finite values are caught below, with a path
            return self._run(env)

    def _run(self, env: Mapping[str, object]) -> list[np.ndarray]:
        vals: list = [None] * len(self.nodes)
        for i, (fn, node, argpos, attrs) in enumerate(self._steps):
            if fn == "var":
                try:
                    v = env[node.name]
                except KeyError:
                    raise UnboundError(f"unbound identifier {node.name!r}") from None
                v = np.asarray(v, dtype=np.float64)
                if v.shape != node.shape:
                    raise ShapeError(f"{node.name!r} bound with shape {v.shape}, declared {node.shape}")
            elif fn == "const":
                vals[i] = node.attrs["value"]
                continue
            else:
                v = fn(*[vals[j] for j in argpos], **attrs)
            if not np.isfinite(v).all():
                raise NonFiniteError(f"non-finite value at {_path_to(self.outputs, node)}")
            vals[i] = v
        return [vals[i] for i in self._out]


def evaluate(expr: Expr, env: Mapping[str, object]) -> np.ndarray:
    return Program([expr]).run(env)[0]


# --------------------------------------------------------------------------
# Differentiation
# --------------------------------------------------------------------------


def _var_name(v) -> str:
    return v.name if isinstance(v, Expr) else str(v)


def _backward(output: Expr, names: Sequence[str]) -> dict[str, Expr]:
    """Emit adjoint expressions d(output)/d(name) by one reverse sweep."""
    if output.shape != ():
        raise ShapeError(f"can only differentiate scalar expressions, got shape {output.shape}")
    targets = set(names)
    order = _toposort([output])
    relevant: set[int] = set()
    for node in order:
        if node.op == "var":
            if node.name in targets:
                relevant.add(node.uid)
            continue
        opdef = _OPS.get(node.op)
        if opdef is None or opdef.vjp is None:
            continue
        if any(a.uid in relevant for a in node.args):
            relevant.add(node.uid)

    adj: dict[int, Expr] = {output.uid: const(1.0)}
    result: dict[str, Expr] = {}
    for node in reversed(order):
        g = adj.pop(node.uid, None)
        if g is None or node.uid not in relevant:
            continue
        if node.op == "var":
            result[node.name] = result[node.name] + g if node.name in result else g
            continue
        for a, ga in zip(node.args, _OPS[node.op].vjp(node, g)):
            if ga is None or a.uid not in relevant:
                continue
            adj[a.uid] = adj[a.uid] + ga if a.uid in adj else ga
    return result


def _check_order(expr: Expr):
    if expr.order >= MAX_ORDER:
        raise NestingError(
            f"expression already contains derivatives of order {expr.order}; "
            f"differentiating it again exceeds the supported depth {MAX_ORDER}")


def gradient_expr(expr: Expr, var) -> Expr:
    """Differentiable expression for d(expr)/d(var).

    ``var`` is an identifier name or a variable node. The result is a
    gradient-of node and can itself be differentiated once more.
    """
    if expr.shape != ():
        raise ShapeError(f"gradient_expr needs a scalar expression, got shape {expr.shape}")
    _check_order(expr)
    name = _var_name(var)
    shapes = free_vars(expr)
    if name in shapes:
        shape = shapes[name]
    elif isinstance(var, Expr):
        shape = var.shape
    else:
        raise UnboundError(f"{name!r} does not occur in the expression")
    expansion = _backward(expr, [name]).get(name)
    if expansion is None:
        expansion = zeros(shape)
    return Expr("grad", (expansion,), attrs={"of": expr, "wrt": name},
                shape=shape, order=expr.order + 1)


def gradient(expr: Expr, vars: Sequence, env: Mapping[str, object]) -> list[np.ndarray]:
    """Exact reverse-mode derivatives of a scalar expression, one per var."""
    if expr.shape != ():
        raise ShapeError(f"gradient needs a scalar expression, got shape {expr.shape}")
    _check_order(expr)
    names = [_var_name(v) for v in vars]
    adj = _backward(expr, names)
    shapes = free_vars(expr)
    outs = [adj[n] for n in names if n in adj]
    values = iter(Program(outs).run(env)) if outs else iter(())
    result = []
    for n in names:
        if n in adj:
            result.append(next(values))
        elif n in shapes:
            result.append(np.zeros(shapes[n]))
        elif n in env:
            result.append(np.zeros(np.shape(env[n])))
        else:
            raise UnboundError(f"unbound variable {n!r}")
    return result


def jacobian(expr: Expr, vars: Sequence, env: Mapping[str, object]) -> np.ndarray:
    """Dense Jacobian of ``expr`` (flattened) w.r.t. the concatenated vars.

    Built row by row: the vector-Jacobian product with a seed identifier is
    recorded once and replayed with one-hot seeds.
    """
    _check_order(expr)
    names = [_var_name(v) for v in vars]
    seed = var("__seed__", expr.shape)
    vjp = _backward(total(expr * seed) if expr.shape else expr * seed, names)
    shapes = free_vars(expr)
    sizes = []
    for n in names:
        if n in shapes:
            sizes.append(int(np.prod(shapes[n], dtype=np.int64)))
        elif n in env:
            sizes.append(int(np.size(env[n])))
        else:
            raise UnboundError(f"unbound variable {n!r}")
    present = [n for n in names if n in vjp]
    prog = Program([vjp[n] for n in present]) if present else None
    rows = []
    local = dict(env)
    for k in range(expr.size):
        e = np.zeros(expr.size)
        e[k] = 1.0
        local["__seed__"] = e.reshape(expr.shape)
        got = dict(zip(present, prog.run(local))) if prog else {}
        rows.append(np.concatenate([
            got[n].ravel() if n in got else np.zeros(s) for n, s in zip(names, sizes)
        ]))
    return np.array(rows).reshape(expr.size, sum(sizes))


def finite_difference(fn: Callable[[np.ndarray], float], point, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    out = np.empty_like(x)
    flat_x, flat_out = x.reshape(-1), out.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = float(fn(x.copy()))
        flat_x[i] = orig - eps
        fm = float(fn(x.copy()))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function value is not finite near coordinate {i}")
        flat_out[i] = (fp - fm) / (2.0 * eps)
    return out
