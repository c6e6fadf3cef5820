"""Small fully-connected networks with hand-written reverse mode and Adam.

Every network stores its parameters as one flat float64 vector so optimizer
state, gradients and checkpoints all share a single layout:
``[W_0.ravel(), b_0, W_1.ravel(), b_1, ...]`` with ``W_l`` of shape
``(input_width, output_width)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import DecodeError, RejectedInputError, TrainingDivergenceError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "relu"

    def __post_init__(self):
        if int(self.input_width) < 1 or int(self.output_width) < 1:
            raise RejectedInputError(f"layer widths must be >= 1, got {self}")
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.input_width * self.output_width + self.output_width


def _activate(kind, pre):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    return pre


def _activation_grad(kind, pre, out, cot):
    if kind == "relu":
        return cot * (pre > 0.0)
    if kind == "tanh":
        return cot * (1.0 - out * out)
    return cot


class Net:
    """A chain of affine layers, each followed by an elementwise activation.

    Parameters
    ----------
    layers : sequence of LayerSpec
        Consecutive specs must have matching widths.
    params : array-like, optional
        Flat parameter vector. When omitted the network is initialized from
        ``rng_seed`` (He-uniform for relu layers, Xavier-uniform otherwise,
        zero biases).
    rng_seed : int
    """

    def __init__(self, layers, params=None, rng_seed=0):
        self.layers = tuple(layers)
        if not self.layers:
            raise RejectedInputError("a Net needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_width != nxt.input_width:
                raise RejectedInputError(
                    f"layer widths do not chain: {prev.output_width} -> {nxt.input_width}"
                )
        self.rng_seed = int(rng_seed)
        n = sum(spec.n_params for spec in self.layers)
        if params is None:
            self.params = self._init_params(np.random.default_rng(self.rng_seed))
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (n,):
                raise RejectedInputError(f"expected {n} parameters, got shape {params.shape}")
            self.params = params

    @classmethod
    def mlp(cls, sizes, activation="relu", out_activation="identity", rng_seed=0):
        """Build ``sizes[0] -> ... -> sizes[-1]`` with ``activation`` on hidden layers."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise RejectedInputError("mlp needs at least input and output sizes")
        specs = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            specs.append(LayerSpec(a, b, out_activation if last else activation))
        return cls(specs, rng_seed=rng_seed)

    def _init_params(self, rng):
        chunks = []
        for spec in self.layers:
            fan_in, fan_out = spec.input_width, spec.output_width
            if spec.activation == "relu":
                bound = np.sqrt(6.0 / fan_in)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    @property
    def n_params(self) -> int:
        return self.params.size

    def weights(self, params=None):
        """Yield ``(W, b)`` views into ``params`` (defaults to ``self.params``)."""
        params = self.params if params is None else params
        offset = 0
        for spec in self.layers:
            n_w = spec.input_width * spec.output_width
            W = params[offset:offset + n_w].reshape(spec.input_width, spec.output_width)
            offset += n_w
            b = params[offset:offset + spec.output_width]
            offset += spec.output_width
            yield W, b

    def copy(self) -> "Net":
        return Net(self.layers, params=self.params.copy(), rng_seed=self.rng_seed)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.input_width:
            raise RejectedInputError(
                f"expected input of width {self.input_width}, got shape {x.shape}"
            )
        return x

    def forward(self, x):
        """Evaluate on one input vector or an array of them (leading axes are batch axes)."""
        h = self._check_input(x)
        for spec, (W, b) in zip(self.layers, self.weights()):
            h = _activate(spec.activation, h @ W + b)
        return h

    __call__ = forward

    def _forward_cache(self, x):
        cache = []
        h = x
        for spec, (W, b) in zip(self.layers, self.weights()):
            pre = h @ W + b
            out = _activate(spec.activation, pre)
            cache.append((h, pre, out))
            h = out
        return h, cache

    def vjp(self, x, cotangent, input_grad=False):
        """Vector-Jacobian product of ``cotangent . forward(x)``.

        Returns the flat parameter gradient, summed over all batch axes, and also
        the gradient w.r.t. ``x`` when ``input_grad`` is true.
        """
        x = self._check_input(x)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != x.shape[:-1] + (self.output_width,):
            raise RejectedInputError(
                f"cotangent shape {cot.shape} does not match output "
                f"{x.shape[:-1] + (self.output_width,)}"
            )
        lead = x.shape[:-1]
        x = x.reshape(-1, self.input_width)
        cot = cot.reshape(-1, self.output_width)
        _, cache = self._forward_cache(x)
        grads = []
        weights = list(self.weights())
        for spec, (W, _), (h_in, pre, out) in zip(
            reversed(self.layers), reversed(weights), reversed(cache)
        ):
            d_pre = _activation_grad(spec.activation, pre, out, cot)
            grads.append(d_pre.sum(axis=0))
            grads.append((h_in.T @ d_pre).ravel())
            cot = d_pre @ W.T
        grad = np.concatenate(grads[::-1])
        if not input_grad:
            return grad
        return grad, cot.reshape(lead + (self.input_width,))

    def backward(self, x, cotangent):
        """Flat gradient of ``cotangent . forward(x)`` w.r.t. the parameters."""
        return self.vjp(x, cotangent)


def forward(net: Net, x):
    return net.forward(x)


def backward(net: Net, x, cotangent):
    return net.backward(x, cotangent)


@dataclass
class AdamState:
    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            learning_rate=float(learning_rate),
            first_moment=np.zeros(n_params),
            second_moment=np.zeros(n_params),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise RejectedInputError(
            f"Adam shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    t = state.step_count + 1
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite gradient", step=t)
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        learning_rate=state.learning_rate,
        first_moment=m,
        second_moment=v,
        step_count=t,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
    )
    return new_params, new_state


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, n_params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState.zeros(n_params, learning_rate, beta1, beta2, eps)

    @property
    def step_count(self):
        return self.state.step_count

    def update(self, params, grad):
        new_params, self.state = adam_step(self.state, params, grad)
        return new_params


# -- checkpoints ------------------------------------------------------------
#
# One JSON header line terminated by b"\n", then every net's parameters as a
# contiguous little-endian float64 array in header order.

CHECKPOINT_FORMAT = "qwrlab-params/1"


def save_checkpoint(path, nets, metadata=None):
    """Write ``nets`` (a mapping of name -> Net) to ``path``."""
    entries = []
    for name, net in nets.items():
        entries.append({
            "name": name,
            "layers": [asdict(spec) for spec in net.layers],
            "rng_seed": net.rng_seed,
            "n_params": int(net.n_params),
        })
    header = {"format": CHECKPOINT_FORMAT, "nets": entries, "metadata": metadata or {}}
    payload = b"".join(net.params.astype("<f8").tobytes() for net in nets.values())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(nets, metadata)``."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DecodeError("checkpoint has no header line")
    try:
        header = json.loads(raw[:newline])
    except ValueError as exc:
        raise DecodeError(f"bad checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DecodeError(f"unknown checkpoint format {header.get('format')!r}")
    body = raw[newline + 1:]
    expected = 8 * sum(entry["n_params"] for entry in header["nets"])
    if len(body) != expected:
        raise DecodeError(f"checkpoint payload is {len(body)} bytes, expected {expected}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    nets, offset = {}, 0
    for entry in header["nets"]:
        n = entry["n_params"]
        specs = [LayerSpec(**spec) for spec in entry["layers"]]
        nets[entry["name"]] = Net(specs, params=flat[offset:offset + n], rng_seed=entry["rng_seed"])
        offset += n
    return nets, header["metadata"]
