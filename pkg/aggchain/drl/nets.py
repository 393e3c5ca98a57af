"""Small fully-connected networks with hand-written backprop, plus Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]


@dataclass
class Mlp:
    """
    tanh hidden layers and a linear output layer, optionally squashed by tanh.

    Parameters live in ``weights``/``biases`` lists; ``flat``/``load_flat``
    expose them as one vector for soft updates, checkpoints and gradient checks.
    """

    sizes: tuple[int, ...]
    squash_output: bool = False
    weights: list[Array] = field(default_factory=list)
    biases: list[Array] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        sizes: tuple[int, ...],
        rng: np.random.Generator,
        squash_output: bool = False,
        final_scale: float = 3e-3,
    ) -> Mlp:
        net = cls(tuple(sizes), squash_output)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
            last = i == len(sizes) - 2
            bound = final_scale if last else 1.0 / math.sqrt(fan_in)
            net.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            net.biases.append(rng.uniform(-bound, bound, size=fan_out) if last else np.zeros(fan_out))
        return net

    def copy(self) -> Mlp:
        return Mlp(
            self.sizes,
            self.squash_output,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def forward(self, x: Array) -> tuple[Array, list[Array]]:
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            z = h @ w + b
            last = i == len(self.weights) - 1
            h = z if last and not self.squash_output else np.tanh(z)
            acts.append(h)
        return h, acts

    def __call__(self, x: Array) -> Array:
        return self.forward(x)[0]

    def backward(self, acts: list[Array], grad_out: Array) -> tuple[list[Array], list[Array], Array]:
        """Gradients w.r.t. weights, biases and the network input for upstream ``grad_out``."""
        gw: list[Array] = [np.empty(0)] * len(self.weights)
        gb: list[Array] = [np.empty(0)] * len(self.biases)
        g = grad_out
        for i in reversed(range(len(self.weights))):
            out = acts[i + 1]
            last = i == len(self.weights) - 1
            if not last or self.squash_output:
                g = g * (1.0 - out**2)
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return gw, gb, g

    def params(self) -> list[Array]:
        return [*self.weights, *self.biases]

    def flat(self) -> Array:
        return np.concatenate([p.ravel() for p in self.params()])

    def load_flat(self, vec: Array) -> None:
        i = 0
        for p in self.params():
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size
        if i != len(vec):
            raise ValueError(f"expected {i} parameters, got {len(vec)}")

    def soft_update_from(self, online: Mlp, tau: float) -> None:
        for t, o in zip(self.params(), online.params(), strict=True):
            t *= 1.0 - tau
            t += tau * o


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    def step(self, params: list[Array], grads: list[Array]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
