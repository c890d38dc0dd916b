"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor doubles as a tape node: results of operations carry references to
their inputs and a closure that routes adjoints backward.  The tape is
rebuilt on every forward pass, so the same parameter leaves can serve any
number of alternating objectives.  A full-coordinate central-difference
gradient checker is included as the module's own oracle.
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Shapes that are required to agree do not."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Reduce an adjoint back to the shape of a broadcast operand.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """Dense array of 64-bit floats plus its place on the tape.

    Leaves are built directly and must be finite; interior nodes are created
    by operations and carry the backward closure.  Adjoints accumulate in
    ``grad`` during ``backprop`` and are never mutated in place, so closures
    may hand the same array to several children safely.
    """

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite (no NaN/Inf)")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._children = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, children: tuple, op: str) -> "Tensor":
        # Interior node: skips the finiteness check (losses guard for NaN).
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(c.requires_grad for c in children)
        out._children = children
        out._backward = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        """A leaf view of the same values that no gradient reaches."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._children = ()
        out._backward = None
        out._op = "leaf"
        return out

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor._result(self.data + other.data, (self, other), "add")

            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g, b.data.shape))

            out._backward = bwd
            return out
        out = Tensor._result(self.data + float(other), (self,), "add")

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g)

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), "neg")

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(-g)

        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor._result(self.data * other.data, (self, other), "mul")

            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accum(_unbroadcast(g * a.data, b.data.shape))

            out._backward = bwd
            return out
        c = float(other)
        out = Tensor._result(self.data * c, (self,), "mul")

        def bwd(g, a=self, c=c):
            if a.requires_grad:
                a._accum(g * c)

        out._backward = bwd
        return out

    __rmul__ = __mul__

    # -- core network ops ---------------------------------------------------

    def affine(self, W: "Tensor", b: "Tensor") -> "Tensor":
        """x @ W + b for x[B,n], W[n,m], b[m]."""
        if self.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
            raise DimensionError(
                "affine expects x[B,n], W[n,m], b[m]; got %s, %s, %s"
                % (self.shape, W.shape, b.shape)
            )
        if self.data.shape[1] != W.data.shape[0] or W.data.shape[1] != b.data.shape[0]:
            raise DimensionError(
                "affine shapes do not chain: x %s, W %s, b %s"
                % (self.shape, W.shape, b.shape)
            )
        out = Tensor._result(self.data @ W.data + b.data, (self, W, b), "affine")

        def bwd(g, x=self, W=W, b=b):
            if x.requires_grad:
                x._accum(g @ W.data.T)
            if W.requires_grad:
                W._accum(x.data.T @ g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))

        out._backward = bwd
        return out

    def leaky_relu(self, alpha: float) -> "Tensor":
        """Elementwise max(x, alpha*x); the derivative at exactly 0 is alpha."""
        if not 0.0 <= alpha < 1.0:
            raise ContractError("leaky_relu alpha must be in [0, 1)")
        factor = np.where(self.data > 0, 1.0, alpha)
        out = Tensor._result(self.data * factor, (self,), "leaky_relu")

        def bwd(g, a=self, factor=factor):
            if a.requires_grad:
                a._accum(g * factor)

        out._backward = bwd
        return out

    def log_softmax(self) -> "Tensor":
        """Row-wise log softmax with max-subtraction stabilization."""
        if self.data.ndim != 2 or self.data.shape[1] < 2:
            raise ContractError("log_softmax expects [B,C] with C >= 2, got %s" % (self.shape,))
        shifted = self.data - self.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        out = Tensor._result(shifted - lse, (self,), "log_softmax")

        def bwd(g, a=self, out=out):
            if a.requires_grad:
                p = np.exp(out.data)
                a._accum(g - p * g.sum(axis=1, keepdims=True))

        out._backward = bwd
        return out

    def softmax(self) -> "Tensor":
        if self.data.ndim != 2 or self.data.shape[1] < 2:
            raise ContractError("softmax expects [B,C] with C >= 2, got %s" % (self.shape,))
        shifted = self.data - self.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        out = Tensor._result(p, (self,), "softmax")

        def bwd(g, a=self, p=p):
            if a.requires_grad:
                a._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))

        out._backward = bwd
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor._result(s, (self,), "sigmoid")

        def bwd(g, a=self, s=s):
            if a.requires_grad:
                a._accum(g * s * (1.0 - s))

        out._backward = bwd
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor._result(t, (self,), "tanh")

        def bwd(g, a=self, t=t):
            if a.requires_grad:
                a._accum(g * (1.0 - t * t))

        out._backward = bwd
        return out

    def log(self) -> "Tensor":
        # Caller guarantees positivity (values are clamped upstream).
        out = Tensor._result(np.log(self.data), (self,), "log")

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g / a.data)

        out._backward = bwd
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clip to [lo, hi]; gradient is zero where the input left the range."""
        out = Tensor._result(np.clip(self.data, lo, hi), (self,), "clamp")
        mask = (self.data > lo) & (self.data < hi)

        def bwd(g, a=self, mask=mask):
            if a.requires_grad:
                a._accum(g * mask)

        out._backward = bwd
        return out

    # -- reductions and indexing -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.data.shape).copy())

        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def slice_cols(self, start: int, stop: int) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError("slice_cols expects a 2-D tensor, got %s" % (self.shape,))
        out = Tensor._result(self.data[:, start:stop], (self,), "slice_cols")

        def bwd(g, a=self, start=start, stop=stop):
            if a.requires_grad:
                z = np.zeros_like(a.data)
                z[:, start:stop] = g
                a._accum(z)

        out._backward = bwd
        return out

    def gather(self, idx) -> "Tensor":
        """out[i] = self[i, idx[i]] for a 2-D tensor; idx must be in range."""
        idx = np.asarray(idx, dtype=np.int64)
        if self.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != self.data.shape[0]:
            raise DimensionError(
                "gather expects x[B,C] and idx[B]; got %s and %s" % (self.shape, idx.shape)
            )
        if idx.min() < 0 or idx.max() >= self.data.shape[1]:
            raise ContractError("gather index out of range [0, %d)" % self.data.shape[1])
        rows = np.arange(self.data.shape[0])
        out = Tensor._result(self.data[rows, idx], (self,), "gather")

        def bwd(g, a=self, rows=rows, idx=idx):
            if a.requires_grad:
                z = np.zeros_like(a.data)
                z[rows, idx] = g
                a._accum(z)

        out._backward = bwd
        return out

    def l2norm(self) -> "Tensor":
        """Euclidean norm of the flattened tensor, as a scalar."""
        n = float(np.sqrt((self.data * self.data).sum()))
        out = Tensor._result(np.asarray(n), (self,), "l2norm")

        def bwd(g, a=self, n=n):
            if a.requires_grad:
                if n > 0.0:
                    a._accum(g * (a.data / n))
                else:
                    a._accum(np.zeros_like(a.data))

        out._backward = bwd
        return out

    # -- backward driver ----------------------------------------------------

    def backprop(self) -> set:
        """Run reverse-mode from this scalar; returns ids of reached nodes.

        Resets ``grad`` on every reachable node first, so stale adjoints from
        previous tapes never leak into the result.
        """
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss, got shape %s" % (self.shape,))
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._children))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                # requires_grad is precomputed as any(children), so a False
                # child has no gradient-bearing leaf anywhere beneath it.
                if id(child) not in seen and child.requires_grad:
                    seen.add(id(child))
                    stack.append((child, iter(child._children)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return seen


class ParamStore:
    """Ordered map of unique names to parameter tensors.

    Insertion order is the serialization order, so gradient vectors and
    checkpoints are reproducible byte for byte.
    """

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ContractError("duplicate parameter name %r" % name)
        self._items[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list:
        return list(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x.affine(W, b)


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    return x.leaky_relu(alpha)


def log_softmax(logits: Tensor) -> Tensor:
    return logits.log_softmax()


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def backward(loss: Tensor, params: ParamStore) -> dict:
    """Gradients of a scalar loss for every named parameter.

    Parameters that never joined the tape map to zero tensors of matching
    shape, which is what optimizers expect for inactive components.
    """
    reached = loss.backprop()
    grads = {}
    for name, p in params.items():
        if id(p) in reached and p.grad is not None:
            grads[name] = Tensor(p.grad)
        else:
            grads[name] = Tensor(np.zeros_like(p.data))
    return grads


class CheckReport:
    """Outcome of a finite-difference gradient check.

    ``analytic`` keeps the reverse-mode gradient per parameter so callers can
    also assert blocking contracts (paths that must report exactly zero).
    """

    def __init__(self, h: float, tol: float):
        self.h = h
        self.tol = tol
        self.max_rel_error = 0.0
        self.n_coords = 0
        self.failures: list[tuple] = []
        self.analytic: dict[str, np.ndarray] = {}

    @property
    def passed(self) -> bool:
        return not self.failures

    def grad_max_abs(self, name: str) -> float:
        a = self.analytic[name]
        return float(np.abs(a).max()) if a.size else 0.0

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return "%s: %d coords, max rel err %.3e (tol %.1e)" % (
            state, self.n_coords, self.max_rel_error, self.tol)


def grad_check(loss_builder, params: ParamStore, h: float = 1e-5,
               tol: float = 1e-4) -> CheckReport:
    """Compare reverse-mode gradients against central differences.

    Perturbs every coordinate of every parameter (the networks are small
    enough that sampling would only hide bugs).  ``loss_builder`` must be
    deterministic for fixed parameters; any stochastic input is the caller's
    job to freeze.  Near-zero coordinates are compared with a 1e-6 floor in
    the denominator so float noise in the difference quotient cannot
    manufacture failures.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    report = CheckReport(h, tol)
    if len(params) == 0:
        return report
    grads = backward(loss_builder(params), params)
    for name, p in params.items():
        report.analytic[name] = grads[name].data.copy()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = report.analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_builder(params).data)
            flat[i] = orig - h
            f_minus = float(loss_builder(params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            rel = abs(analytic - numeric) / denom
            report.n_coords += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
            if rel > tol:
                idx = np.unravel_index(i, p.data.shape)
                report.failures.append((name, idx, analytic, numeric, rel))
    return report
