"""Minimal reverse-mode differentiable core for desk-scale ranking nets.

This is deliberately not a general autodiff framework: it supports exactly
the operations the scoring heads, propensity models, and loss objectives
need, all in float64. The models involved are tiny (a few hundred thousand
parameters at most), so exact, checkable gradients matter far more than
throughput.

Every op builds a node in a define-by-run graph; ``backward`` walks the
graph in reverse topological order and accumulates gradients into parameter
leaves. A central finite-difference checker is included and is the oracle
against which every analytic gradient in the package is validated.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class GradientError(RuntimeError):
    """Raised when gradients are non-finite or an update must be rejected."""


class CheckpointError(RuntimeError):
    """Raised on malformed or mismatched checkpoint payloads."""


def _as64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Var:
    """A value in the computation graph.

    ``parents`` and ``_vjp`` record how the value was produced; ``backward``
    uses them to push gradients toward the leaves. Leaves created with
    ``requires_grad=True`` (parameters) receive their gradient in ``.grad``.
    """

    __slots__ = ("value", "parents", "_vjp", "requires_grad", "grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = _as64(value)
        self.parents: tuple[Var, ...] = tuple(parents)
        self._vjp = vjp
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar: constants are lifted automatically.
    def __add__(self, other):
        return add(self, lift(other))

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, lift(other))

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, lift(other))

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __truediv__(self, other):
        return div(self, lift(other))

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, lift(other))


def lift(x) -> Var:
    """Wrap a constant as a gradient-free leaf (no-op on existing Vars)."""
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # Remove leading broadcast axes.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    out = Var(
        a.value + b.value,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )
    return out


def sub(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value - b.value,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value * b.value,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value / b.value,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value**2), b.value.shape),
        ),
    )


def neg(a: Var) -> Var:
    a = lift(a)
    return Var(-a.value, parents=(a,), vjp=lambda g: (-g,))


def matmul(a: Var, b: Var) -> Var:
    """2-D matrix product. Shapes (n, d) @ (d, k)."""
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return Var(
        a.value @ b.value,
        parents=(a, b),
        vjp=lambda g: (g @ b.value.T, a.value.T @ g),
    )


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    a = lift(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,), vjp=vjp)


def vmean(a: Var) -> Var:
    a = lift(a)
    n = a.value.size
    return Var(
        a.value.mean(),
        parents=(a,),
        vjp=lambda g: (np.broadcast_to(g / n, a.value.shape).copy(),),
    )


def vexp(a: Var) -> Var:
    a = lift(a)
    out_val = np.exp(a.value)
    return Var(out_val, parents=(a,), vjp=lambda g: (g * out_val,))


def vlog(a: Var) -> Var:
    a = lift(a)
    return Var(np.log(a.value), parents=(a,), vjp=lambda g: (g / a.value,))


def elu(a: Var) -> Var:
    a = lift(a)
    out_val = np.where(a.value > 0, a.value, np.expm1(a.value))
    return Var(
        out_val,
        parents=(a,),
        vjp=lambda g: (g * np.where(a.value > 0, 1.0, out_val + 1.0),),
    )


def sigmoid(a: Var) -> Var:
    a = lift(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Var(s, parents=(a,), vjp=lambda g: (g * s * (1.0 - s),))


def softplus(a: Var) -> Var:
    """log(1 + exp(x)), computed stably."""
    a = lift(a)
    x = a.value
    out_val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return Var(out_val, parents=(a,), vjp=vjp)


def log_softmax(a: Var) -> Var:
    """Stable log-softmax over the last axis."""
    a = lift(a)
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_val = shifted - lse

    def vjp(g):
        return (g - np.exp(out_val) * g.sum(axis=-1, keepdims=True),)

    return Var(out_val, parents=(a,), vjp=vjp)


def softmax(a: Var) -> Var:
    a = lift(a)
    x = a.value
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    s = shifted / shifted.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return Var(s, parents=(a,), vjp=vjp)


def reshape(a: Var, shape) -> Var:
    a = lift(a)
    old = a.value.shape
    return Var(
        a.value.reshape(shape), parents=(a,), vjp=lambda g: (g.reshape(old),)
    )


def gather(a: Var, indices) -> Var:
    """Index rows (1-D: elements, 2-D: rows) of ``a``; scatter-adds on backward."""
    a = lift(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], parents=(a,), vjp=vjp)


def gather2d(a: Var, rows, cols) -> Var:
    """Fancy-index ``a[rows, cols]`` for a 2-D table."""
    a = lift(a)
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (r, c), g)
        return (out,)

    return Var(a.value[r, c], parents=(a,), vjp=vjp)


def hconcat(a: Var, b: Var) -> Var:
    """Concatenate two 2-D blocks along the last axis."""
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("hconcat expects 2-D operands")
    na = a.value.shape[1]

    def vjp(g):
        return (g[:, :na], g[:, na:])

    return Var(np.concatenate([a.value, b.value], axis=1), parents=(a, b), vjp=vjp)


def dropout(a: Var, rate: float, seed: int, mode: str = "train") -> Var:
    """Inverted dropout: surviving entries are scaled by 1/(1-rate).

    Evaluation mode and rate 0 both return the input node unchanged, so the
    no-dropout path is bitwise identical to not calling this at all. The
    mask depends only on (seed, shape), never on the values, which keeps
    finite-difference checks of dropped objectives valid.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = lift(a)
    if mode != "train" or rate == 0.0:
        return a
    rng = np.random.default_rng(seed)
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return Var(a.value * mask, parents=(a,), vjp=lambda g: (g * mask,))


def grad_reverse(a: Var, lam: float) -> Var:
    """Identity on the forward pass; multiplies the gradient by ``-lam``."""
    a = lift(a)
    return Var(a.value, parents=(a,), vjp=lambda g: (-lam * g,))


def stop_gradient(a: Var) -> Var:
    """Detach: same value, no gradient flows to ``a``."""
    a = lift(a)
    return Var(a.value)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(root: Var, seed_grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    ``root`` is usually a scalar loss; ``seed_grad`` defaults to ones of the
    root's shape. Grads accumulate (+=), so callers reset leaves between
    steps via ``zero_grads`` or ``ParamStore.zero_grads``.
    """
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, Array] = {}
    if seed_grad is None:
        seed_grad = np.ones_like(root.value)
    grads[id(root)] = _as64(seed_grad)

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(params: Iterable[Var]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Parameters, initialization, nets
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter leaves plus AdamW slot state.

    Parameter order is the sorted name order everywhere (updates, serialization,
    finite-difference coordinate enumeration), which makes every reduction and
    every checkpoint byte deterministic.
    """

    def __init__(self):
        self.params: dict[str, Var] = {}
        self.adam_m: dict[str, Array] = {}
        self.adam_v: dict[str, Array] = {}
        self.step: int = 0

    def add(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Var(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = p
        self.adam_m[name] = np.zeros_like(p.value)
        self.adam_v[name] = np.zeros_like(p.value)
        return p

    def __getitem__(self, name: str) -> Var:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def copy_values(self) -> dict[str, Array]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_values(self, values: dict[str, Array]) -> None:
        for k, v in values.items():
            self.params[k].value = np.array(v, dtype=np.float64)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> Array:
    """Fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True)
class NetSpec:
    """Shape of a feed-forward net: in_dim -> hidden... -> out_dim.

    ``activation`` applies after every hidden layer; the output layer is
    linear. ``final_zero`` zero-initializes the output layer, which several
    components use to start at an exactly neutral operating point.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int = 1
    activation: str = "elu"
    dropout: float = 0.0
    final_zero: bool = False

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.hidden, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_json(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "dropout": self.dropout,
            "final_zero": self.final_zero,
        }

    @staticmethod
    def from_json(d: dict) -> "NetSpec":
        return NetSpec(
            in_dim=int(d["in_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            out_dim=int(d["out_dim"]),
            activation=str(d["activation"]),
            dropout=float(d["dropout"]),
            final_zero=bool(d["final_zero"]),
        )


_ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "elu": elu,
    "sigmoid": sigmoid,
    "identity": lambda v: v,
}


def init_mlp(store: ParamStore, spec: NetSpec, prefix: str, rng: np.random.Generator) -> None:
    """Create the weight/bias parameters for ``spec`` under ``prefix``."""
    layers = spec.layer_dims()
    for i, (din, dout) in enumerate(layers):
        is_last = i == len(layers) - 1
        if is_last and spec.final_zero:
            w = np.zeros((din, dout))
        else:
            w = he_uniform(rng, din, (din, dout))
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(dout))


def mlp_forward(
    store: ParamStore,
    spec: NetSpec,
    prefix: str,
    x,
    mode: str = "eval",
    seed: int = 0,
) -> Var:
    """Run the net on ``x`` of shape (n, in_dim); returns (n, out_dim).

    ``x`` may be a constant array or a Var (gradients then also flow into the
    input, which the gradient-reversal pathway relies on). Dropout, when
    configured, applies after each hidden activation in train mode only.
    """
    act = _ACTIVATIONS[spec.activation]
    h = lift(x)
    if h.value.ndim != 2 or h.value.shape[1] != spec.in_dim:
        raise ValueError(
            f"input shape {h.value.shape} incompatible with in_dim={spec.in_dim}"
        )
    layers = spec.layer_dims()
    for i in range(len(layers)):
        h = matmul(h, store[f"{prefix}.w{i}"]) + store[f"{prefix}.b{i}"]
        if i < len(layers) - 1:
            h = act(h)
            if spec.dropout > 0.0:
                h = dropout(h, spec.dropout, seed=seed + i, mode=mode)
    return h


def embed(table: Var, index: int) -> Var:
    """Row lookup in an embedding table; unused rows get zero gradient."""
    return gather(table, np.asarray([index]))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(
    store: ParamStore,
    config: AdamWConfig,
    grads: dict[str, Array] | None = None,
    param_filter: Callable[[str], bool] | None = None,
    lr_override: dict[str, float] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update over the store's parameters.

    ``grads`` defaults to the ``.grad`` attributes populated by ``backward``;
    parameters with no gradient are skipped entirely (no decay either), so an
    untouched submodel stays bitwise frozen. Non-finite gradients reject the
    whole update with a diagnostic naming the offending parameters.

    ``lr_override`` maps a name prefix (up to the first dot) to a different
    learning rate, which lets small side-models (positional propensity
    tables, gating nets) move faster than the main scorer when configured.
    """
    if grads is None:
        grads = {
            name: p.grad
            for name, p in store.params.items()
            if p.grad is not None
        }
    bad = sorted(
        name for name, g in grads.items() if not np.all(np.isfinite(g))
    )
    if bad:
        raise GradientError(f"non-finite gradient for parameters: {', '.join(bad)}")

    store.step += 1
    t = store.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in sorted(grads):
        if param_filter is not None and not param_filter(name):
            continue
        g = grads[name]
        p = store.params[name]
        lr = config.lr
        if lr_override:
            head = name.split(".", 1)[0]
            lr = lr_override.get(head, config.lr)
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.value = p.value * (1.0 - lr * config.weight_decay) - lr * mhat / (
            np.sqrt(vhat) + config.eps
        )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_builder: Callable[[], Var],
    params: Sequence[Var] | ParamStore,
    h: float = 1e-5,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Central-difference check of analytic gradients; returns max relative error.

    ``loss_builder`` must rebuild the scalar loss from the parameters' current
    values on every call (and must be deterministic: any dropout seeds fixed).
    A random subsample of at most ``max_coords`` coordinates is probed with
    symmetric perturbations of ``h``. The relative error denominator is
    floored at 1e-4 so near-zero gradient coordinates are compared at that
    absolute scale instead: a symmetric difference at h=1e-5 carries rounding
    noise around eps*|loss|/h (~1e-10 for unit-scale losses), so demanding
    finer absolute agreement than the floor allows would flag measurement
    noise, while any error the probe can actually resolve still exceeds the
    floored ratio by orders of magnitude.
    """
    if isinstance(params, ParamStore):
        plist = [params.params[n] for n in params.names()]
    else:
        plist = list(params)
    if rng is None:
        rng = np.random.default_rng(0)

    loss = loss_builder()
    if loss.value.size != 1:
        raise ValueError("finite_diff_check expects a scalar loss")
    if not np.isfinite(loss.value):
        raise GradientError("loss is non-finite at the linearization point")
    zero_grads(plist)
    backward(loss)
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.value) for p in plist
    ]

    coords = [
        (i, j) for i, p in enumerate(plist) for j in range(p.value.size)
    ]
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in picked]

    worst = 0.0
    for i, j in coords:
        flat = plist[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = float(loss_builder().value)
        flat[j] = orig - h
        down = float(loss_builder().value)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradientError("loss became non-finite under perturbation")
        fd = (up - down) / (2.0 * h)
        an = float(analytic[i].reshape(-1)[j])
        denom = max(abs(fd), abs(an), 1e-4)
        worst = max(worst, abs(fd - an) / denom)
    return worst


# ---------------------------------------------------------------------------
# Exact parameter serialization
# ---------------------------------------------------------------------------


def encode_array(a: Array) -> dict:
    """Lossless JSON encoding: base64 of the little-endian float64 bytes."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> Array:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(d["shape"])


def store_state(store: ParamStore) -> dict:
    """Bit-exact snapshot of parameters + optimizer slots."""
    return {
        "step": store.step,
        "params": {k: encode_array(store.params[k].value) for k in store.names()},
        "adam_m": {k: encode_array(store.adam_m[k]) for k in store.names()},
        "adam_v": {k: encode_array(store.adam_v[k]) for k in store.names()},
    }


def load_store_state(state: dict) -> ParamStore:
    store = ParamStore()
    try:
        for name, payload in state["params"].items():
            store.add(name, decode_array(payload))
            store.adam_m[name] = decode_array(state["adam_m"][name])
            store.adam_v[name] = decode_array(state["adam_v"][name])
        store.step = int(state["step"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed parameter state: {exc}") from exc
    return store
