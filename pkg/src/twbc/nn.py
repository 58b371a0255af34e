"""Small fully-connected networks with explicit forward/backward passes.

Everything is float64 numpy. A network is a stack of linear layers with tanh
or relu between them and a linear output; gradients are computed by hand so
the training loops stay dependency-free and bit-reproducible. The module also
provides the second-order machinery (reverse over a forward-mode pass) needed
to differentiate input-gradient penalties with respect to parameters, plus a
central-difference gradient checker used as the test oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu")
_HEADS = ("scalar_logit", "gaussian_mean", "scalar_value")


class GradientError(ValueError):
    """Raised when a gradient turns non-finite (names the offending tensor)."""


@dataclass
class Mlp:
    """Linear stack: sizes[0] -> ... -> sizes[-1], activation between layers.

    ``head`` records how the raw linear output is interpreted downstream
    (logit, Gaussian mean, or scalar value); it does not change forward math.
    """

    sizes: list[int]
    activation: str
    head: str
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_names(self) -> list[str]:
        out: list[str] = []
        for i in range(len(self.weights)):
            out.append(f"layer{i}.W")
            out.append(f"layer{i}.b")
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            sizes=list(self.sizes),
            activation=self.activation,
            head=self.head,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def init_mlp(
    sizes: list[int],
    activation: str,
    head: str,
    rng: np.random.Generator,
) -> Mlp:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if head not in _HEADS:
        raise ValueError(f"unknown head {head!r}")
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes=list(sizes), activation=activation, head=head,
               weights=weights, biases=biases)


@dataclass
class ForwardCache:
    """Activations kept from a forward pass for the matching backward pass."""

    x: np.ndarray
    zs: list[np.ndarray]        # pre-activations per layer, output layer last
    activs: list[np.ndarray]    # post-activation outputs of hidden layers


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_prime(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


def _act_second(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; x has shape (B, in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    zs: list[np.ndarray] = []
    activs: list[np.ndarray] = []
    a = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        zs.append(z)
        if i < n_layers - 1:
            a = _act(z, net.activation)
            activs.append(a)
    return zs[-1], ForwardCache(x=x, zs=zs, activs=activs)


def backward(
    net: Mlp,
    cache: ForwardCache,
    grad_out: np.ndarray,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop grad_out (B, out_dim) to parameter grads and input grads.

    Returns grads in the same layout as ``net.params()`` and d(loss)/d(input).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n_layers = len(net.weights)
    grads_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d = grad_out
    for i in range(n_layers - 1, -1, -1):
        a_prev = cache.x if i == 0 else cache.activs[i - 1]
        grads_w[i] = a_prev.T @ d
        grads_b[i] = d.sum(axis=0)
        d = d @ net.weights[i].T
        if i > 0:
            d = d * _act_prime(cache.zs[i - 1], cache.activs[i - 1], net.activation)
    params_grads: list[np.ndarray] = []
    for gw, gb in zip(grads_w, grads_b):
        params_grads.append(gw)
        params_grads.append(gb)
    return params_grads, d


def input_gradients(net: Mlp, cache: ForwardCache, out_index: int = 0) -> np.ndarray:
    """Per-sample gradient of one output coordinate with respect to the input."""
    b = cache.x.shape[0]
    d = np.zeros((b, net.out_dim))
    d[:, out_index] = 1.0
    for i in range(len(net.weights) - 1, -1, -1):
        d = d @ net.weights[i].T
        if i > 0:
            d = d * _act_prime(cache.zs[i - 1], cache.activs[i - 1], net.activation)
    return d


def jvp_param_grads(
    net: Mlp,
    cache: ForwardCache,
    direction: np.ndarray,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Differentiate sum_b <grad_x f(x_b), r_b> with respect to parameters.

    ``direction`` holds the per-sample vectors r_b (B, in_dim). The scalar
    h_b = directional derivative of the first output along r_b is computed by
    a forward tangent pass, then a reverse pass over that tangent computation
    yields d(sum_b h_b)/d(params). This is the second-order piece needed by
    input-gradient penalties; the activation's second derivative enters here.

    Returns (h values per sample, parameter grads in params() layout).
    """
    if net.out_dim != 1:
        raise ValueError("jvp_param_grads expects a scalar-output network")
    n_layers = len(net.weights)
    act = net.activation
    # Tangent forward: t flows like the input, zdot like pre-activations.
    t = np.asarray(direction, dtype=np.float64)
    ts: list[np.ndarray] = [t]          # t_0 .. t_{L-1}
    zdots: list[np.ndarray] = []        # zdot_1 .. zdot_L
    primes: list[np.ndarray] = []       # activation' at hidden layers
    for i in range(n_layers):
        zdot = ts[-1] @ net.weights[i]
        zdots.append(zdot)
        if i < n_layers - 1:
            p = _act_prime(cache.zs[i], cache.activs[i], act)
            primes.append(p)
            ts.append(p * zdot)
    h = zdots[-1][:, 0].copy()

    grads_w: list[np.ndarray] = [np.zeros_like(w) for w in net.weights]
    grads_b: list[np.ndarray] = [np.zeros_like(b) for b in net.biases]
    # Reverse over the combined graph. a_z is the adjoint of the primal
    # pre-activation z_l (reached only through activation' factors), a_t the
    # adjoint of the tangent stream.
    a_zdot = np.ones_like(zdots[-1])
    grads_w[-1] += ts[-1].T @ a_zdot
    a_t = a_zdot @ net.weights[-1].T
    a_a = None  # adjoint of hidden activation a_l via the primal path
    for i in range(n_layers - 2, -1, -1):
        # t_{i+1} = primes[i] * zdots[i]
        a_zdot = a_t * primes[i]
        a_z = a_t * zdots[i] * _act_second(cache.zs[i], cache.activs[i], act)
        if a_a is not None:
            a_z = a_z + a_a * primes[i]
        a_prev_t = ts[i]
        a_prev_a = cache.x if i == 0 else cache.activs[i - 1]
        grads_w[i] += a_prev_t.T @ a_zdot + a_prev_a.T @ a_z
        grads_b[i] += a_z.sum(axis=0)
        a_t = a_zdot @ net.weights[i].T
        a_a = a_z @ net.weights[i].T
    out: list[np.ndarray] = []
    for gw, gb in zip(grads_w, grads_b):
        out.append(gw)
        out.append(gb)
    return h, out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def init_adam(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    names: list[str] | None = None,
) -> None:
    """One Adam update in place, with decoupled weight decay.

    Decay multiplies parameters by (1 - lr * weight_decay) before the Adam
    delta is applied, so zero gradients with zero decay leave params intact.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads layouts differ")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise GradientError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        m = state.m[i]
        v = state.v[i]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def finite_diff_check(
    loss_and_grad,
    params: list[np.ndarray],
    rng: np.random.Generator,
    num_coords: int = 64,
    step: float = 1e-5,
) -> float:
    """Central-difference check of analytic gradients.

    ``loss_and_grad()`` evaluates the loss and its gradients at the current
    parameter values (the closure reads ``params`` directly). A random subset
    of coordinates is perturbed in place; returns the max relative error
    |analytic - numeric| / max(1e-8, |numeric|) over the sampled coordinates.
    """
    _, grads = loss_and_grad()
    sizes = [p.size for p in params]
    total = int(np.sum(sizes))
    k = min(num_coords, total)
    coords = rng.choice(total, size=k, replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in coords:
        p_idx = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        j = int(flat_idx - offsets[p_idx])
        arr = params[p_idx]
        orig = arr.flat[j]
        arr.flat[j] = orig + step
        lo_plus, _ = loss_and_grad()
        arr.flat[j] = orig - step
        lo_minus, _ = loss_and_grad()
        arr.flat[j] = orig
        numeric = (lo_plus - lo_minus) / (2.0 * step)
        analytic = grads[p_idx].flat[j]
        err = abs(analytic - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst


def save_mlp(net: Mlp, path: str | Path, extra: dict | None = None) -> None:
    """Write a versioned JSON checkpoint (exact float64 round trip)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "sizes": list(net.sizes),
        "activation": net.activation,
        "head": net.head,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(
        json.dumps(payload, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_mlp(path: str | Path) -> tuple[Mlp, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    net = Mlp(
        sizes=[int(s) for s in payload["sizes"]],
        activation=payload["activation"],
        head=payload["head"],
        weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
    )
    return net, payload.get("extra", {})
