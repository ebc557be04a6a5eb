"""Small deterministic reverse-mode differentiation core.

Values are dense float64 arrays wrapped in :class:`Tensor`. All computation
goes through :class:`Tape`, which records each forward call in order and
replays the sequence backward to accumulate gradients. There is no operator
overloading and no graph structure beyond the recorded list: every kernel
pairs a numpy forward with an analytic backward rule, and :func:`grad_check`
verifies any composition against central finite differences.

Kernels are pure (no hidden state) and deterministic: identical inputs give
bit-identical outputs. Gradients accumulate additively across uses of a
parameter; callers zero them explicitly between steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """An operation received tensors with incompatible or invalid shapes."""


class Tensor:
    """Dense n-dimensional float64 array; the single value type of the core."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter:
    """Trainable tensor with a persistent, explicitly zeroed gradient."""

    __slots__ = ("value", "grad", "id")

    def __init__(self, value, pid: str):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.id = str(pid)

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


# Elementwise derivative rules live at module level so a test harness can
# swap one out and watch the finite-difference checker catch the mismatch.
def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _tanh_grad(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _smoothed_targets(n: int, c: int, targets: np.ndarray, smoothing: float) -> np.ndarray:
    q = np.full((n, c), smoothing / c)
    q[np.arange(n), targets] += 1.0 - smoothing
    return q


class Tape:
    """Recorded computation sequence; replaying it in reverse yields gradients.

    Each op appends (output, inputs, backward_fn) to the record. ``backward``
    seeds the scalar output with 1.0, walks the record in reverse, and sums
    every contribution a value receives from its consumers. Gradients of
    parameters used via :meth:`use` are flushed additively into
    ``Parameter.grad`` at the end of the replay.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._param_nodes: dict[int, tuple[Parameter, Tensor]] = {}
        self._grads: dict[int, np.ndarray] = {}

    # -- leaves ---------------------------------------------------------

    def constant(self, data) -> Tensor:
        return data if isinstance(data, Tensor) else Tensor(data)

    def use(self, param: Parameter) -> Tensor:
        """In-tape view of a parameter; the same node on repeated use."""
        hit = self._param_nodes.get(id(param))
        if hit is not None:
            return hit[1]
        node = Tensor(param.value.data)
        self._param_nodes[id(param)] = (param, node)
        return node

    def stop_gradient(self, a: Tensor) -> Tensor:
        """Same values, no backward connection (the copy is unrecorded)."""
        return Tensor(a.data)

    # -- recording ------------------------------------------------------

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
        self._entries.append((out, inputs, bwd))
        return out

    # -- kernels --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
        out = Tensor(a.data @ b.data)

        def bwd(g):
            return g @ b.data.T, a.data.T @ g

        return self._record(out, (a, b), bwd)

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
        out = Tensor(a.data.T)

        def bwd(g):
            return (g.T,)

        return self._record(out, (a,), bwd)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        out = Tensor(a.data.reshape(shape))

        def bwd(g):
            return (g.reshape(a.data.shape),)

        return self._record(out, (a,), bwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)

        def bwd(g):
            return g, g

        return self._record(out, (a, b), bwd)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
        out = Tensor(a.data - b.data)

        def bwd(g):
            return g, -g

        return self._record(out, (a, b), bwd)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)

        def bwd(g):
            return g * b.data, g * a.data

        return self._record(out, (a, b), bwd)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(a.data * c)

        def bwd(g):
            return (g * c,)

        return self._record(out, (a,), bwd)

    def sigmoid(self, a: Tensor) -> Tensor:
        y = _stable_sigmoid(a.data)
        out = Tensor(y)

        def bwd(g):
            return (g * _sigmoid_grad(out.data),)

        return self._record(out, (a,), bwd)

    def tanh(self, a: Tensor) -> Tensor:
        out = Tensor(np.tanh(a.data))

        def bwd(g):
            return (g * _tanh_grad(out.data),)

        return self._record(out, (a,), bwd)

    def relu(self, a: Tensor) -> Tensor:
        out = Tensor(np.maximum(a.data, 0.0))

        def bwd(g):
            return (g * (a.data > 0.0),)

        return self._record(out, (a,), bwd)

    def softmax(self, a: Tensor, axis: int) -> Tensor:
        m = a.data.max(axis=axis, keepdims=True)
        e = np.exp(a.data - m)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y)

        def bwd(g):
            s = out.data
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        return self._record(out, (a,), bwd)

    def cross_entropy(self, logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
        """Mean softmax cross-entropy over rows with integer index targets.

        Backward is (softmax - targets)/n where targets is the (optionally
        smoothed) one-hot matrix.
        """
        if logits.data.ndim != 2:
            raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
        n, c = logits.shape
        t = np.asarray(targets, dtype=np.int64)
        if t.shape != (n,):
            raise ShapeError(f"cross_entropy: targets shape {t.shape}, expected ({n},)")
        if t.size and (t.min() < 0 or t.max() >= c):
            raise ValueError("cross_entropy: target index out of range")
        if not 0.0 <= label_smoothing < 1.0:
            raise ValueError("cross_entropy: label_smoothing must be in [0, 1)")

        x = logits.data
        m = x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
        q = _smoothed_targets(n, c, t, label_smoothing)
        losses = lse[:, 0] - (q * x).sum(axis=1)
        out = Tensor(losses.mean())

        def bwd(g):
            p = np.exp(x - lse)
            return ((p - q) * (g.reshape(-1)[0] / n),)

        return self._record(out, (logits,), bwd)

    def linear_map_1x1(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """w @ x + b per column: a 1x1 convolution over P positions."""
        if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
            raise ShapeError("linear_map_1x1: x and w must be 2-d, b 1-d")
        if w.shape[1] != x.shape[0] or b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"linear_map_1x1: shapes w{w.shape} x{x.shape} b{b.shape} do not chain"
            )
        out = Tensor(w.data @ x.data + b.data[:, None])

        def bwd(g):
            return w.data.T @ g, g @ x.data.T, g.sum(axis=1)

        return self._record(out, (x, w, b), bwd)

    def add_rowvec(self, a: Tensor, v: Tensor) -> Tensor:
        """a[n,m] + v[m] broadcast across rows."""
        if a.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != a.shape[1]:
            raise ShapeError(f"add_rowvec: shapes {a.shape} and {v.shape}")
        out = Tensor(a.data + v.data[None, :])

        def bwd(g):
            return g, g.sum(axis=0)

        return self._record(out, (a, v), bwd)

    def sub_rowvec(self, a: Tensor, v: Tensor) -> Tensor:
        """a[n,m] - v[m] broadcast across rows."""
        if a.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != a.shape[1]:
            raise ShapeError(f"sub_rowvec: shapes {a.shape} and {v.shape}")
        out = Tensor(a.data - v.data[None, :])

        def bwd(g):
            return g, -g.sum(axis=0)

        return self._record(out, (a, v), bwd)

    def sub_colvec(self, a: Tensor, v: Tensor) -> Tensor:
        """a[n,m] - v[n] broadcast across columns."""
        if a.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != a.shape[0]:
            raise ShapeError(f"sub_colvec: shapes {a.shape} and {v.shape}")
        out = Tensor(a.data - v.data[:, None])

        def bwd(g):
            return g, -g.sum(axis=1)

        return self._record(out, (a, v), bwd)

    def take_row(self, a: Tensor, i: int) -> Tensor:
        if a.data.ndim != 2 or not 0 <= i < a.shape[0]:
            raise ShapeError(f"take_row: row {i} of shape {a.shape}")
        out = Tensor(a.data[i])

        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[i] = g
            return (buf,)

        return self._record(out, (a,), bwd)

    def take_rows(self, a: Tensor, idx) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        if a.data.ndim != 2 or idx.ndim != 1:
            raise ShapeError("take_rows: a must be 2-d, idx 1-d")
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ValueError("take_rows: row index out of range")
        out = Tensor(a.data[idx])

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            return (buf,)

        return self._record(out, (a,), bwd)

    def take_flat(self, a: Tensor, idx: np.ndarray) -> Tensor:
        """Gather from the flattened input; backward scatter-adds."""
        flat = a.data.reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
            raise ValueError("take_flat: flat index out of range")
        out = Tensor(flat[idx])

        def bwd(g):
            buf = np.zeros(flat.size)
            np.add.at(buf, idx.reshape(-1), g.reshape(-1))
            return (buf.reshape(a.data.shape),)

        return self._record(out, (a,), bwd)

    def stack_rows(self, rows: list[Tensor]) -> Tensor:
        if not rows:
            raise ShapeError("stack_rows: empty input")
        width = rows[0].data.reshape(-1).shape[0]
        for r in rows:
            if r.data.ndim != 1 or r.shape[0] != width:
                raise ShapeError("stack_rows: all rows must be 1-d of equal length")
        out = Tensor(np.stack([r.data for r in rows], axis=0))

        def bwd(g):
            return tuple(g[i] for i in range(len(rows)))

        return self._record(out, tuple(rows), bwd)

    def diag_part(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"diag_part: expected square matrix, got {a.shape}")
        out = Tensor(np.diagonal(a.data).copy())

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.fill_diagonal(buf, g)
            return (buf,)

        return self._record(out, (a,), bwd)

    def col_block(self, a: Tensor, start: int, width: int) -> Tensor:
        if a.data.ndim != 2 or start < 0 or width < 1 or start + width > a.shape[1]:
            raise ShapeError(f"col_block: [{start}:{start + width}) of shape {a.shape}")
        out = Tensor(a.data[:, start:start + width])

        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[:, start:start + width] = g
            return (buf,)

        return self._record(out, (a,), bwd)

    def concat_rows(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(f"concat_rows: shapes {a.shape} and {b.shape}")
        out = Tensor(np.concatenate([a.data, b.data], axis=0))
        na = a.shape[0]

        def bwd(g):
            return g[:na], g[na:]

        return self._record(out, (a, b), bwd)

    def sum_axis(self, a: Tensor, axis: int) -> Tensor:
        out = Tensor(a.data.sum(axis=axis))

        def bwd(g):
            return (np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis),)

        return self._record(out, (a,), bwd)

    def sum_all(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.sum())

        def bwd(g):
            return (np.full_like(a.data, g.reshape(-1)[0]),)

        return self._record(out, (a,), bwd)

    def mean_all(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.mean())

        def bwd(g):
            return (np.full_like(a.data, g.reshape(-1)[0] / a.data.size),)

        return self._record(out, (a,), bwd)

    def mean_pool_segments(self, a: Tensor, seg_len: int) -> Tensor:
        """Mean over consecutive column segments: [c, B*P] -> [c, B]."""
        if a.data.ndim != 2 or seg_len < 1 or a.shape[1] % seg_len != 0:
            raise ShapeError(f"mean_pool_segments: {a.shape} with segment {seg_len}")
        c, total = a.shape
        out = Tensor(a.data.reshape(c, total // seg_len, seg_len).mean(axis=2))

        def bwd(g):
            return (np.repeat(g, seg_len, axis=1) / seg_len,)

        return self._record(out, (a,), bwd)

    # -- replay ---------------------------------------------------------

    def backward(self, out: Tensor) -> None:
        if out.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node, inputs, bwd in reversed(self._entries):
            g = grads.get(id(node))
            if g is None:
                continue
            contribs = bwd(g)
            for inp, contrib in zip(inputs, contribs):
                if contrib is None:
                    continue
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = np.array(contrib, dtype=np.float64)
                else:
                    prev += contrib
        self._grads = grads
        for param, node in self._param_nodes.values():
            g = grads.get(id(node))
            if g is not None:
                param.grad.data += g

    def grad(self, node: Tensor) -> np.ndarray:
        """Gradient of the last backward target with respect to ``node``."""
        g = self._grads.get(id(node))
        if g is None:
            return np.zeros_like(node.data)
        return g


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_err: float
    tolerance: float
    passed: bool


def grad_check(name, fn, inputs, tolerance=1e-5, step=1e-5, seed=0) -> GradCheckReport:
    """Compare the recorded backward of ``fn`` against central differences.

    ``fn(tape, *nodes) -> node`` may return any shape; a fixed random
    cotangent turns it into a scalar objective so the comparison covers every
    input scalar. Relative error is floored at unit scale so near-zero
    gradients do not blow up the ratio.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)

    tape = Tape()
    nodes = [tape.constant(x.copy()) for x in arrays]
    out = fn(tape, *nodes)
    vec = rng.standard_normal(out.data.shape)
    loss = tape.sum_all(tape.mul(out, tape.constant(vec)))
    tape.backward(loss)
    analytic = [tape.grad(n).copy() for n in nodes]

    def objective(xs):
        t = Tape()
        ns = [t.constant(x) for x in xs]
        o = fn(t, *ns)
        return float((o.data * vec).sum())

    max_rel = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        an_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = objective(arrays)
            flat[j] = orig - step
            lo = objective(arrays)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = an_flat[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > max_rel:
                max_rel = rel
    return GradCheckReport(name, max_rel, tolerance, max_rel <= tolerance)


def standard_kernel_checks(instances: int = 10, seed: int = 0) -> list[GradCheckReport]:
    """Finite-difference battery over every kernel at random instances.

    Returns one report per kernel, max relative error taken over
    ``instances`` random shapes/points. relu points are kept away from the
    kink at 0 (finite differences straddle it otherwise).
    """
    rng = np.random.default_rng(seed)
    reports: list[GradCheckReport] = []

    def run(name, fn, make_inputs):
        worst = 0.0
        for k in range(instances):
            rep = grad_check(name, fn, make_inputs(), seed=seed + 1000 + k)
            worst = max(worst, rep.max_rel_err)
        reports.append(GradCheckReport(name, worst, 1e-5, worst <= 1e-5))

    def rand(*shape):
        return rng.standard_normal(shape)

    run("matmul", lambda t, a, b: t.matmul(a, b), lambda: [rand(3, 4), rand(4, 2)])
    run("transpose", lambda t, a: t.transpose(a), lambda: [rand(3, 4)])
    run("reshape", lambda t, a: t.reshape(a, (2, 6)), lambda: [rand(3, 4)])
    run("add", lambda t, a, b: t.add(a, b), lambda: [rand(3, 4), rand(3, 4)])
    run("sub", lambda t, a, b: t.sub(a, b), lambda: [rand(3, 4), rand(3, 4)])
    run("mul", lambda t, a, b: t.mul(a, b), lambda: [rand(3, 4), rand(3, 4)])
    run("scale", lambda t, a: t.scale(a, -1.7), lambda: [rand(3, 4)])
    run("sigmoid", lambda t, a: t.sigmoid(a), lambda: [rand(3, 4)])
    run("tanh", lambda t, a: t.tanh(a), lambda: [rand(3, 4)])
    run(
        "relu",
        lambda t, a: t.relu(a),
        lambda: [np.sign(rand(3, 4)) * (0.05 + np.abs(rand(3, 4)))],
    )
    run("softmax_axis0", lambda t, a: t.softmax(a, 0), lambda: [rand(4, 3)])
    run("softmax_axis1", lambda t, a: t.softmax(a, 1), lambda: [rand(3, 5)])
    run(
        "cross_entropy",
        lambda t, a: t.cross_entropy(a, [0, 2, 1]),
        lambda: [rand(3, 4)],
    )
    run(
        "cross_entropy_smoothed",
        lambda t, a: t.cross_entropy(a, [1, 0, 3], label_smoothing=0.1),
        lambda: [rand(3, 4)],
    )
    run(
        "linear_map_1x1",
        lambda t, x, w, b: t.linear_map_1x1(x, w, b),
        lambda: [rand(4, 5), rand(3, 4), rand(3)],
    )
    run("add_rowvec", lambda t, a, v: t.add_rowvec(a, v), lambda: [rand(3, 4), rand(4)])
    run("sub_rowvec", lambda t, a, v: t.sub_rowvec(a, v), lambda: [rand(3, 4), rand(4)])
    run("sub_colvec", lambda t, a, v: t.sub_colvec(a, v), lambda: [rand(3, 4), rand(3)])
    run("take_row", lambda t, a: t.take_row(a, 1), lambda: [rand(3, 4)])
    run("take_rows", lambda t, a: t.take_rows(a, [2, 0, 2]), lambda: [rand(3, 4)])
    idx = np.arange(12).reshape(3, 4) % 11
    run("take_flat", lambda t, a: t.take_flat(a, idx), lambda: [rand(11)])
    run(
        "stack_rows",
        lambda t, a, b, c: t.stack_rows([a, b, c]),
        lambda: [rand(4), rand(4), rand(4)],
    )
    run("diag_part", lambda t, a: t.diag_part(a), lambda: [rand(4, 4)])
    run("col_block", lambda t, a: t.col_block(a, 1, 2), lambda: [rand(3, 5)])
    run(
        "concat_rows",
        lambda t, a, b: t.concat_rows(a, b),
        lambda: [rand(2, 4), rand(3, 4)],
    )
    run("sum_axis0", lambda t, a: t.sum_axis(a, 0), lambda: [rand(3, 4)])
    run("sum_axis1", lambda t, a: t.sum_axis(a, 1), lambda: [rand(3, 4)])
    run("sum_all", lambda t, a: t.sum_all(a), lambda: [rand(3, 4)])
    run("mean_all", lambda t, a: t.mean_all(a), lambda: [rand(3, 4)])
    run(
        "mean_pool_segments",
        lambda t, a: t.mean_pool_segments(a, 3),
        lambda: [rand(4, 6)],
    )
    return reports
