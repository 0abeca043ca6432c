"""MLPs over a flat parameter vector, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor

ACTIVATIONS = ("tanh", "swish")


@dataclass(frozen=True)
class ParamSet:
    """Flat parameter vector with an optimizer step counter.

    Treated as an immutable value: optimizers return a new ParamSet.
    """

    vector: np.ndarray
    step: int = 0

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def size(self) -> int:
        return self.vector.size

    def snapshot(self) -> "ParamSet":
        return ParamSet(self.vector.copy(), self.step)

    def leaf(self) -> Tensor:
        return Tensor(self.vector, requires_grad=True)

    def replace(self, vector: np.ndarray, step: int | None = None) -> "ParamSet":
        return ParamSet(vector, self.step if step is None else step)


@dataclass(frozen=True)
class Mlp:
    """Dense MLP; ``sizes`` includes input and output widths. Final layer is linear."""

    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def layout(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """Per layer: (weight slice, weight shape, bias slice) into the flat vector."""
        out, off = [], 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(off, off + n_in * n_out)
            off += n_in * n_out
            b = slice(off, off + n_out)
            off += n_out
            out.append((w, (n_in, n_out), b))
        return out

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng: np.random.Generator, final_gain: float = 0.01,
             hidden_gain: float = np.sqrt(2.0)) -> ParamSet:
        """Orthogonal weights, zero biases; the last layer gets ``final_gain``."""
        vec = np.zeros(self.n_params)
        layers = self.layout
        for i, (w, shape, _) in enumerate(layers):
            gain = final_gain if i == len(layers) - 1 else hidden_gain
            vec[w] = (gain * _orthogonal(rng, shape)).ravel()
        return ParamSet(vec)

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input (batch, {self.in_dim}), got {x.shape}")
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite MLP input")

    def forward(self, theta: Tensor, x) -> Tensor:
        """Differentiable forward; records on the active tape if ``theta`` requires grad."""
        x = ad.as_tensor(x)
        self._check_input(x.data)
        h = x
        layers = self.layout
        for i, (w, shape, b) in enumerate(layers):
            h = h @ theta[w].reshape(shape) + theta[b]
            if i < len(layers) - 1:
                h = ad.tanh(h) if self.activation == "tanh" else ad.swish(h)
        return h

    def apply(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward for rollouts; same arithmetic as :meth:`forward`."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        h = x
        layers = self.layout
        for i, (w, shape, b) in enumerate(layers):
            h = h @ theta[w].reshape(shape) + theta[b]
            if i < len(layers) - 1:
                if self.activation == "tanh":
                    h = np.tanh(h)
                else:
                    h = h * (0.5 * (1.0 + np.tanh(0.5 * h)))
        if not np.isfinite(h).all():
            raise NonFiniteError("non-finite MLP output")
        return h


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def forward(mlp: Mlp, params, x) -> Tensor:
    """``mlp`` applied to ``x`` under ``params`` (ParamSet, ndarray or Tensor)."""
    if isinstance(params, ParamSet):
        params = Tensor(params.vector)
    elif not isinstance(params, Tensor):
        params = Tensor(params)
    return mlp.forward(params, x)


@dataclass
class AdamState:
    size: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise ValueError("moment vectors must match the parameter count")


def adam_step(params: ParamSet, grads: np.ndarray, state: AdamState) -> ParamSet:
    """One bias-corrected Adam update. Non-finite gradients leave everything untouched."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.vector.shape:
        raise ValueError(f"gradient shape {grads.shape} != params {params.vector.shape}")
    if not np.isfinite(grads).all():
        raise NonFiniteError("non-finite gradient; update aborted")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new = params.vector - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamSet(new, params.step + 1)
