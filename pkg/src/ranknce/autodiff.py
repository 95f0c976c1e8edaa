"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is recorded on an explicit :class:`Tape`: each operation appends
one node holding the op name, the input node ids, and a closure that maps the
output gradient to input gradients. Gradients are accumulated in fixed
reverse-tape order, so identical inputs give bit-identical gradients.

Tapes are independent: building one graph per training step and discarding
it is the intended usage. Nothing here is thread-shared.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "neg",
    "relu",
    "tanh",
    "log",
    "exp",
    "softplus",
    "matmul",
    "transpose",
    "reshape",
    "reduce_mean",
    "reduce_sum",
    "stack",
    "concat",
    "take",
    "gather_pairs",
    "gather_spatial",
    "zero_diag",
    "l2_normalize",
    "conv2d",
    "softmax_ce",
    "backward",
    "fd_check",
]


class NonFiniteError(ArithmeticError):
    """A forward value or gradient left the finite float64 range."""


class _Node:
    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of operations, in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list | None = None

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, grad_fn):
        self.nodes.append(_Node(op, inputs, grad_fn))
        self.grads = None
        return len(self.nodes) - 1

    def leaf(self, data, name="leaf"):
        """Register a leaf tensor. `data` is adopted as float64, not copied
        when already float64 (callers may mutate it between tapes, never
        within one)."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"leaf {name!r} contains non-finite entries")
        node = self._append(name, (), None)
        return Tensor(arr, self, node)


class Tensor:
    """Dense row-major float64 array bound to one tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape, node):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        """Gradient after backward(); zero for leaves the root never reached."""
        if self.tape.grads is None:
            return None
        g = self.tape.grads[self.node]
        if g is None:
            return np.zeros_like(self.data)
        return g

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _result(tape, op, data, inputs, grad_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op {op!r} produced a non-finite value")
    node = tape._append(op, tuple(t.node for t in inputs), grad_fn)
    return Tensor(data, tape, node)


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b):
    """Elementwise a + b; also supports (m, n) + (n,) row-bias broadcast."""
    tape = _same_tape(a, b)
    if a.shape == b.shape:
        return _result(tape, "add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result(
            tape, "add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0))
        )
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _result(tape, "sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(tape, "mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    if not math.isfinite(c):
        raise ValueError("scale: factor must be finite")
    return _result(a.tape, "scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a, c):
    c = float(c)
    if not math.isfinite(c):
        raise ValueError("add_const: constant must be finite")
    return _result(a.tape, "add_const", a.data + c, (a,), lambda g: (g,))


def neg(a):
    return scale(a, -1.0)


def relu(a):
    mask = a.data > 0.0
    return _result(a.tape, "relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    t = np.tanh(a.data)
    return _result(a.tape, "tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def log(a):
    if np.any(a.data <= 0.0):
        raise ValueError("log: domain error, all entries must be > 0")
    ad = a.data
    return _result(a.tape, "log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a):
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _result(a.tape, "exp", e, (a,), lambda g: (g * e,))


def softplus(a):
    """log(1 + exp(x)) computed without overflow; derivative is sigmoid(x)."""
    x = a.data
    t = np.exp(-np.abs(x))  # always <= 1, safe on both branches
    out = np.maximum(x, 0.0) + np.log1p(t)
    sig = np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    return _result(a.tape, "softplus", out, (a,), lambda g: (g * sig,))


def matmul(a, b):
    tape = _same_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        tape, "matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g)
    )


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError("transpose: expects a matrix")
    return _result(a.tape, "transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    return _result(
        a.tape, "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),)
    )


def reduce_mean(a):
    n = a.data.size
    if n == 0:
        raise ValueError("reduce_mean: empty tensor")
    shape = a.data.shape
    return _result(
        a.tape,
        "reduce_mean",
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.full(shape, float(g) / n),),
    )


def reduce_sum(a):
    shape = a.data.shape
    return _result(
        a.tape,
        "reduce_sum",
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.full(shape, float(g)),),
    )


def stack(tensors):
    """Stack scalar tensors into a vector."""
    if not tensors:
        raise ValueError("stack: empty input")
    tape = _same_tape(*tensors)
    for t in tensors:
        if t.data.shape != ():
            raise ValueError("stack: all inputs must be scalars")
    data = np.array([t.data for t in tensors], dtype=np.float64)

    def grad_fn(g):
        return tuple(np.asarray(g[i]) for i in range(len(tensors)))

    return _result(tape, "stack", data, tuple(tensors), grad_fn)


def concat(tensors):
    """Concatenate 1-d tensors."""
    if not tensors:
        raise ValueError("concat: empty input")
    tape = _same_tape(*tensors)
    for t in tensors:
        if t.data.ndim != 1:
            raise ValueError("concat: all inputs must be 1-d")
    data = np.concatenate([t.data for t in tensors])
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[offsets[i] : offsets[i + 1]].copy() for i in range(len(sizes)))

    return _result(tape, "concat", data, tuple(tensors), grad_fn)


def take(v, index):
    """Extract one entry of a vector as a scalar."""
    if v.data.ndim != 1:
        raise ValueError("take: expects a vector")
    index = int(index)
    if not 0 <= index < v.data.shape[0]:
        raise ValueError(f"take: index {index} out of range")
    n = v.data.shape[0]

    def grad_fn(g):
        gv = np.zeros(n)
        gv[index] = float(g)
        return (gv,)

    return _result(v.tape, "take", np.asarray(v.data[index]), (v,), grad_fn)


def gather_pairs(m, rows, cols):
    """Extract m[rows[i], cols[i]] into a vector; backward scatter-adds."""
    if m.data.ndim != 2:
        raise ValueError("gather_pairs: expects a matrix")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ValueError("gather_pairs: rows/cols must be equal-length 1-d indices")
    h, w = m.shape
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise ValueError("gather_pairs: index out of range")
    shape = m.data.shape

    def grad_fn(g):
        gm = np.zeros(shape)
        np.add.at(gm, (rows, cols), g)
        return (gm,)

    return _result(m.tape, "gather_pairs", m.data[rows, cols].copy(), (m,), grad_fn)


def gather_spatial(act, locations):
    """Pick feature columns of a [C,H,W] activation at flat spatial indices.

    Returns an (S, C) matrix whose row s is act[:, locations[s]] over the
    flattened H*W axis.
    """
    if act.data.ndim != 3:
        raise ValueError("gather_spatial: expects a [C,H,W] tensor")
    c, h, w = act.shape
    locs = np.asarray(locations, dtype=np.int64)
    if locs.ndim != 1:
        raise ValueError("gather_spatial: locations must be 1-d")
    if locs.size and (locs.min() < 0 or locs.max() >= h * w):
        raise ValueError(f"gather_spatial: location out of range 0..{h * w - 1}")
    flat = act.data.reshape(c, h * w)
    out = flat[:, locs].T.copy()

    def grad_fn(g):
        gf = np.zeros((c, h * w))
        np.add.at(gf, (slice(None), locs), g.T)
        return (gf.reshape(c, h, w),)

    return _result(act.tape, "gather_spatial", out, (act,), grad_fn)


def zero_diag(m):
    """Copy of a square matrix with the diagonal structurally zeroed.

    The output diagonal is a constant, so no gradient flows to the input
    diagonal through this op; off-diagonal gradients pass through unchanged.
    """
    if m.data.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("zero_diag: expects a square matrix")
    data = m.data.copy()
    np.fill_diagonal(data, 0.0)

    def grad_fn(g):
        gm = g.copy()
        np.fill_diagonal(gm, 0.0)
        return (gm,)

    return _result(m.tape, "zero_diag", data, (m,), grad_fn)


def l2_normalize(v, eps=1e-12):
    """Normalize a vector, or each row of a matrix, to unit Euclidean norm.

    Backward applies the Jacobian (I - n n^T) / ||x|| per row. A norm at or
    below `eps` raises, naming the offending row.
    """
    if v.data.ndim == 1:
        mat = v.data[None, :]
        vector_input = True
    elif v.data.ndim == 2:
        mat = v.data
        vector_input = False
    else:
        raise ValueError("l2_normalize: expects a vector or matrix")
    norms = np.sqrt((mat * mat).sum(axis=1))
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise ValueError(f"l2_normalize: row {int(bad[0])} has near-zero norm")
    normed = mat / norms[:, None]

    def grad_fn(g):
        gm = g[None, :] if vector_input else g
        proj = (gm * normed).sum(axis=1, keepdims=True)
        gx = (gm - proj * normed) / norms[:, None]
        return (gx[0] if vector_input else gx,)

    out = normed[0] if vector_input else normed
    return _result(v.tape, "l2_normalize", out, (v,), grad_fn)


def conv2d(x, kernel, bias):
    """3x3 cross-correlation, stride 1, zero padding 1, extents preserved.

    x is [C_in,H,W], kernel [C_out,C_in,3,3], bias [C_out]. The heavy
    lifting is delegated to the selected kernel backend.
    """
    if x.data.ndim != 3:
        raise ValueError("conv2d: input must be [C_in,H,W]")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError("conv2d: kernel must be [C_out,C_in,3,3]")
    if kernel.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv2d: channel mismatch, input has {x.shape[0]}, kernel expects {kernel.shape[1]}"
        )
    if bias.data.shape != (kernel.shape[0],):
        raise ValueError("conv2d: bias must be [C_out]")
    tape = _same_tape(x, kernel, bias)
    xd, kd = x.data, kernel.data
    out = kernels.conv2d_forward(xd, kd, bias.data)

    def grad_fn(g):
        return kernels.conv2d_backward(xd, kd, g)

    return _result(tape, "conv2d", out, (x, kernel, bias), grad_fn)


def softmax_ce(logits, target=0):
    """Cross-entropy of softmax(logits) against a one-hot target index.

    Computed as logsumexp(logits) - logits[target]; overflow-free and exact
    to float64 rounding. Backward is softmax(logits) minus the one-hot.
    """
    if logits.data.ndim != 1:
        raise ValueError("softmax_ce: logits must be 1-d")
    n = logits.data.shape[0]
    target = int(target)
    if not 0 <= target < n:
        raise ValueError(f"softmax_ce: target {target} out of range for {n} logits")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def grad_fn(g):
        gz = p.copy()
        gz[target] -= 1.0
        return (gz * float(g),)

    return _result(
        logits.tape, "softmax_ce", np.asarray(lse - z[target]), (logits,), grad_fn
    )


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape, root):
    """Accumulate gradients of a scalar root into every reachable node.

    Accumulation follows fixed reverse-tape order; repeated runs over the
    same tape are bit-identical. Leaves the root never touches read back as
    zero via Tensor.grad.
    """
    if root.tape is not tape:
        raise ValueError("backward: root does not belong to this tape")
    if root.data.shape != ():
        raise ValueError("backward: root must be a scalar")
    grads: list = [None] * len(tape.nodes)
    grads[root.node] = np.asarray(1.0)
    for nid in range(root.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.grad_fn is None:
            continue
        for iid, ig in zip(node.inputs, node.grad_fn(g)):
            if ig is None:
                continue
            if grads[iid] is None:
                grads[iid] = ig
            else:
                # fresh array, never in-place: backward outputs may alias
                # saved buffers or other nodes' gradients
                grads[iid] = grads[iid] + ig
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("backward produced a non-finite gradient")
    tape.grads = grads


def fd_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a leaf Tensor to a scalar Tensor and must be evaluable at the
    perturbed points. Returns max over coordinates of
    |analytic - central| / max(1, |central|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("fd_check: eps must lie in [1e-7, 1e-3]")
    x0 = np.asarray(x, dtype=np.float64)

    tape = Tape()
    leaf = tape.leaf(x0.copy())
    out = f(leaf)
    if out.data.shape != ():
        raise ValueError("fd_check: f must return a scalar")
    backward(tape, out)
    analytic = leaf.grad.reshape(-1)

    def eval_at(arr):
        t = Tape()
        val = f(t.leaf(arr)).data
        if not np.isfinite(val):
            raise NonFiniteError("fd_check: f evaluated to a non-finite value")
        return float(val)

    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = eval_at((flat + bump).reshape(x0.shape))
        lo = eval_at((flat - bump).reshape(x0.shape))
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst
