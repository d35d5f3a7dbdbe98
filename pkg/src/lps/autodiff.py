"""A small numpy differentiation engine.

Two evaluation modes share one primitive table:

* ``Tensor`` records a tape for reverse-mode gradients.
* ``Dual`` carries a tangent alongside the primal for forward-mode
  Jacobian-vector products.

Plain ``np.ndarray`` arguments run the primitive with no bookkeeping, so the
same network code serves inference, ``reverse_grad`` and ``jvp``.
"""
import numpy as np

__all__ = [
    "Tensor", "Dual", "add", "sub", "mul", "div", "neg", "matmul", "affine",
    "gelu", "relu", "tanh", "sin", "cos", "square", "sum", "mean", "norm", "concat",
    "minimum", "reshape", "stop_gradient", "reverse_grad", "jvp",
    "finite_diff_check", "value_of", "tree_map", "tree_leaves",
]


def value_of(x):
    """Return the raw array behind a Tensor, Dual or array-like."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Dual):
        return x.primal
    return np.asarray(x)


def tree_map(fn, tree):
    if isinstance(tree, (list, tuple)):
        return type(tree)(tree_map(fn, t) for t in tree)
    return fn(tree)


def tree_leaves(tree):
    if isinstance(tree, (list, tuple)):
        out = []
        for t in tree:
            out.extend(tree_leaves(t))
        return out
    return [tree]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class _Operators:
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tensor(_Operators):
    """Array node on the reverse-mode tape."""

    __slots__ = ("data", "grad", "_parents", "_vjp")
    __array_priority__ = 100

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.data.shape}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for _, parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for idx, parent in node._parents:
                g = grads[idx]
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


class Dual(_Operators):
    """Primal value paired with a forward-mode tangent of the same shape."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 100

    def __init__(self, primal, tangent=None):
        self.primal = np.asarray(primal)
        if tangent is None:
            tangent = np.zeros_like(self.primal)
        tangent = np.asarray(tangent, dtype=self.primal.dtype)
        if tangent.shape != self.primal.shape:
            raise ValueError(
                f"tangent shape {tangent.shape} does not match primal shape {self.primal.shape}")
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self):
        return f"Dual(shape={self.primal.shape})"


def _const(a):
    # python scalars stay weakly typed so float32 graphs are not upcast
    if isinstance(a, (int, float)):
        return a
    return np.asarray(a)


class _Primitive:
    """Forward rule plus its vjp and jvp.

    ``fwd_aux``, when given, returns ``(y, aux)`` on differentiated paths and
    ``aux`` is handed to the derivative rules as a keyword.
    """

    def __init__(self, name, fwd, vjp, jvp, fwd_aux=None):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp
        self.jvp = jvp
        self.fwd_aux = fwd_aux

    def _forward(self, xs, kw):
        if self.fwd_aux is None:
            return self.fwd(*xs, **kw), kw
        y, aux = self.fwd_aux(*xs, **kw)
        return y, dict(kw, aux=aux)

    def __call__(self, *args, **kw):
        has_tensor = has_dual = False
        for a in args:
            if isinstance(a, Tensor):
                has_tensor = True
            elif isinstance(a, Dual):
                has_dual = True
        if has_tensor and has_dual:
            raise TypeError(f"{self.name}: cannot mix Tensor and Dual arguments")
        if has_tensor:
            xs = [a.data if isinstance(a, Tensor) else _const(a) for a in args]
            y, kw = self._forward(xs, kw)
            parents = tuple((i, a) for i, a in enumerate(args) if isinstance(a, Tensor))
            needs = [isinstance(a, Tensor) for a in args]
            vjp = self.vjp

            def back(g):
                return vjp(g, y, xs, needs, **kw)

            return Tensor(y, parents, back)
        if has_dual:
            xs = [a.primal if isinstance(a, Dual) else _const(a) for a in args]
            ts = [a.tangent if isinstance(a, Dual) else None for a in args]
            y, kw = self._forward(xs, kw)
            return Dual(y, self.jvp(ts, y, xs, **kw))
        return self.fwd(*[_const(a) for a in args], **kw)


def _primitive(name, fwd, fwd_aux=None):
    def deco(cls):
        return _Primitive(name, fwd, cls.vjp, cls.jvp, fwd_aux)
    return deco


def _tsum(ts, fn, like):
    out = None
    for i, t in enumerate(ts):
        if t is None:
            continue
        term = fn(i, t)
        out = term if out is None else out + term
    return np.zeros_like(like) if out is None else out


# --- elementwise arithmetic -------------------------------------------------

@_primitive("add", lambda a, b: a + b)
class add:
    def vjp(g, y, xs, needs):
        return [_unbroadcast(g, x.shape) if n else None for x, n in zip(xs, needs)]

    def jvp(ts, y, xs):
        return _tsum(ts, lambda i, t: np.broadcast_to(t, y.shape), y)


@_primitive("sub", lambda a, b: a - b)
class sub:
    def vjp(g, y, xs, needs):
        a, b = xs
        return [_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None]

    def jvp(ts, y, xs):
        return _tsum(ts, lambda i, t: np.broadcast_to(t if i == 0 else -t, y.shape), y)


@_primitive("mul", lambda a, b: a * b)
class mul:
    def vjp(g, y, xs, needs):
        a, b = xs
        return [_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None]

    def jvp(ts, y, xs):
        a, b = xs
        return _tsum(ts, lambda i, t: np.broadcast_to(t * b if i == 0 else a * t, y.shape), y)


@_primitive("div", lambda a, b: a / b)
class div:
    def vjp(g, y, xs, needs):
        a, b = xs
        return [_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * y / b, b.shape) if needs[1] else None]

    def jvp(ts, y, xs):
        a, b = xs
        return _tsum(ts, lambda i, t: np.broadcast_to(t / b if i == 0 else -y * t / b, y.shape), y)


@_primitive("neg", lambda a: -a)
class neg:
    def vjp(g, y, xs, needs):
        return [-g]

    def jvp(ts, y, xs):
        return -ts[0]


@_primitive("square", lambda a: a * a)
class square:
    def vjp(g, y, xs, needs):
        return [2.0 * xs[0] * g]

    def jvp(ts, y, xs):
        return 2.0 * xs[0] * ts[0]


@_primitive("minimum", np.minimum)
class minimum:
    def vjp(g, y, xs, needs):
        a, b = xs
        take_a = a <= b
        return [_unbroadcast(np.where(take_a, g, 0.0), a.shape) if needs[0] else None,
                _unbroadcast(np.where(take_a, 0.0, g), b.shape) if needs[1] else None]

    def jvp(ts, y, xs):
        a, b = xs
        ta = np.zeros_like(y) if ts[0] is None else np.broadcast_to(ts[0], y.shape)
        tb = np.zeros_like(y) if ts[1] is None else np.broadcast_to(ts[1], y.shape)
        return np.where(a <= b, ta, tb)


# --- linear algebra -----------------------------------------------------------

@_primitive("matmul", lambda x, w: x @ w)
class matmul:
    def vjp(g, y, xs, needs):
        x, w = xs
        return [g @ w.T if needs[0] else None, x.T @ g if needs[1] else None]

    def jvp(ts, y, xs):
        x, w = xs
        return _tsum(ts, lambda i, t: t @ w if i == 0 else x @ t, y)


@_primitive("affine", lambda x, w, b: x @ w + b)
class affine:
    def vjp(g, y, xs, needs):
        x, w, b = xs
        return [g @ w.T if needs[0] else None,
                x.T @ g if needs[1] else None,
                _unbroadcast(g, b.shape) if needs[2] else None]

    def jvp(ts, y, xs):
        x, w, b = xs
        def term(i, t):
            if i == 0:
                return t @ w
            if i == 1:
                return x @ t
            return np.broadcast_to(t, y.shape)

        return _tsum(ts, term, y)


# --- activations --------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


# Written with in-place ops and x * x rather than x ** 3; the power ufunc is
# two orders of magnitude slower than a multiply on this numpy build.
def _gelu(x):
    inner = x * x
    inner *= _GELU_C * 0.044715
    inner += _GELU_C
    inner *= x
    y = np.tanh(inner, out=inner)
    y += 1.0
    y *= x
    y *= 0.5
    return y


def _gelu_with_slope(x):
    u = x * x
    inner = u * (_GELU_C * 0.044715)
    inner += _GELU_C
    inner *= x
    th = np.tanh(inner, out=inner)
    y = th + 1.0
    y *= x
    y *= 0.5
    # slope = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 * 0.044715 x^2)
    slope = th * th
    np.subtract(1.0, slope, out=slope)
    slope *= x
    u *= 3 * 0.044715
    u += 1.0
    slope *= u
    slope *= 0.5 * _GELU_C
    th *= 0.5
    slope += th
    slope += 0.5
    return y, slope


@_primitive("gelu", _gelu, _gelu_with_slope)
class gelu:
    """tanh-approximated GELU"""

    def vjp(g, y, xs, needs, aux):
        return [g * aux]

    def jvp(ts, y, xs, aux):
        return ts[0] * aux


@_primitive("relu", lambda x: np.maximum(x, 0.0))
class relu:
    def vjp(g, y, xs, needs):
        return [g * (xs[0] > 0)]

    def jvp(ts, y, xs):
        return ts[0] * (xs[0] > 0)


@_primitive("clip", lambda x, lo=-1.0, hi=1.0: np.clip(x, lo, hi))
class clip:
    # gradient passes only where the input lies strictly inside the box
    def vjp(g, y, xs, needs, lo=-1.0, hi=1.0):
        return [g * ((xs[0] > lo) & (xs[0] < hi))]

    def jvp(ts, y, xs, lo=-1.0, hi=1.0):
        return ts[0] * ((xs[0] > lo) & (xs[0] < hi))


@_primitive("tanh", np.tanh)
class tanh:
    def vjp(g, y, xs, needs):
        return [g * (1.0 - y * y)]

    def jvp(ts, y, xs):
        return ts[0] * (1.0 - y * y)


@_primitive("sin", np.sin)
class sin:
    def vjp(g, y, xs, needs):
        return [g * np.cos(xs[0])]

    def jvp(ts, y, xs):
        return ts[0] * np.cos(xs[0])


@_primitive("cos", np.cos)
class cos:
    def vjp(g, y, xs, needs):
        return [-g * np.sin(xs[0])]

    def jvp(ts, y, xs):
        return -ts[0] * np.sin(xs[0])


# --- reductions and reshaping ------------------------------------------------------

def _expand(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


@_primitive("sum", lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims))
class sum:
    def vjp(g, y, xs, needs, axis=None, keepdims=False):
        return [_expand(g, xs[0], axis, keepdims)]

    def jvp(ts, y, xs, axis=None, keepdims=False):
        return np.sum(ts[0], axis=axis, keepdims=keepdims)


@_primitive("mean", lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims))
class mean:
    def vjp(g, y, xs, needs, axis=None, keepdims=False):
        x = xs[0]
        n = x.size if axis is None else x.shape[axis]
        return [_expand(g, x, axis, keepdims) / n]

    def jvp(ts, y, xs, axis=None, keepdims=False):
        return np.mean(ts[0], axis=axis, keepdims=keepdims)


@_primitive("norm", lambda x, axis=-1: np.sqrt(np.sum(x * x, axis=axis, keepdims=True)))
class norm:
    """L2 norm along ``axis``; the reduced axis is kept with size one."""

    def vjp(g, y, xs, needs, axis=-1):
        return [g * xs[0] / y]

    def jvp(ts, y, xs, axis=-1):
        return np.sum(xs[0] * ts[0], axis=axis, keepdims=True) / y


def _concat(*xs, axis=-1):
    return np.concatenate(xs, axis=axis)


@_primitive("concat", _concat)
class concat:
    def vjp(g, y, xs, needs, axis=-1):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(g, bounds, axis=axis)

    def jvp(ts, y, xs, axis=-1):
        return np.concatenate([np.zeros_like(x) if t is None else t for x, t in zip(xs, ts)], axis=axis)


@_primitive("reshape", lambda x, shape: np.reshape(x, shape))
class _reshape:
    def vjp(g, y, xs, needs, shape):
        return [np.reshape(g, xs[0].shape)]

    def jvp(ts, y, xs, shape):
        return np.reshape(ts[0], shape)


def reshape(x, shape):
    return _reshape(x, shape=tuple(shape))


def stop_gradient(x):
    """Forward value unchanged; no derivative flows through the result."""
    if isinstance(x, Tensor):
        return Tensor(x.data)
    if isinstance(x, Dual):
        return x.primal
    return x


# --- drivers --------------------------------------------------------------------

def reverse_grad(program, params, inputs=(), wrt_inputs=False):
    """Gradient of a scalar ``program(params, *inputs)`` w.r.t. ``params``.

    ``params`` may be an array or a nested list/tuple of arrays; the returned
    gradients mirror that structure. With ``wrt_inputs=True`` the input
    gradients are returned as a third element.
    """
    leaves = tree_map(Tensor, params)
    ins = [Tensor(x) if wrt_inputs else x for x in inputs]
    out = program(leaves, *ins)
    if not isinstance(out, Tensor):
        raise TypeError("program output does not depend on the differentiated arguments")
    if out.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.data.shape}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value in forward pass")
    out.backward()

    def grad_of(t):
        return np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)

    grads = tree_map(grad_of, leaves)
    loss = out.data.reshape(()).item()
    if wrt_inputs:
        return loss, grads, [grad_of(t) for t in ins]
    return loss, grads


def jvp(program, params, inputs, tangents):
    """Forward-mode product of the Jacobian w.r.t. ``inputs`` with ``tangents``.

    Parameters are held constant. Returns ``(primal_output, tangent_output)``.
    """
    if len(inputs) != len(tangents):
        raise ValueError("need one tangent per input")
    duals = []
    for x, t in zip(inputs, tangents):
        x = np.asarray(x)
        t = np.asarray(t, dtype=x.dtype)
        if x.shape != t.shape:
            raise ValueError(f"tangent shape {t.shape} does not match input shape {x.shape}")
        duals.append(Dual(x, t))
    out = program(params, *duals)
    if isinstance(out, Dual):
        return out.primal, out.tangent
    out = np.asarray(out)
    return out, np.zeros_like(out)


def _pow2(step):
    # x +/- step is exact for more inputs when step is a power of two
    return float(2.0 ** np.round(np.log2(step)))


def _rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else np.inf


def finite_diff_check(program, params, inputs=(), mode="grad", step=1e-5, tangents=None):
    """Worst relative discrepancy between analytic and central-difference derivatives.

    ``mode="grad"`` perturbs every parameter entry; ``mode="jvp"`` compares the
    tangent output along ``tangents`` (random normal when omitted). The error
    for each array is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    h = _pow2(step)
    if mode == "grad":
        _, grads = reverse_grad(program, params, inputs)
        flat = [np.array(p, dtype=np.float64) for p in tree_leaves(params)]
        analytic = tree_leaves(grads)

        def rebuild():
            it = iter(flat)
            return tree_map(lambda _: next(it), params)

        def f():
            return float(np.asarray(value_of(program(rebuild(), *inputs))).reshape(()))

        worst = 0.0
        for arr, ga in zip(flat, analytic):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                fp = f()
                arr[idx] = orig - h
                fm = f()
                arr[idx] = orig
                num[idx] = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(ga, num))
        return worst
    if mode == "jvp":
        inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
        if tangents is None:
            rng = np.random.default_rng(0)
            # dyadic tangents keep x +/- step * t exact for well-scaled x
            tangents = [np.round(8 * rng.standard_normal(x.shape)) / 8 for x in inputs]
        _, t_out = jvp(program, params, inputs, tangents)
        plus = program(params, *[x + h * t for x, t in zip(inputs, tangents)])
        minus = program(params, *[x - h * t for x, t in zip(inputs, tangents)])
        num = (np.asarray(value_of(plus)) - np.asarray(value_of(minus))) / (2 * h)
        return _rel_err(t_out, num)
    raise ValueError(f"unknown mode {mode!r}")
