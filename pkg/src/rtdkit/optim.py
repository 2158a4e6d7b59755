"""Adam with decoupled weight decay, and the linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """A loss or gradient contained NaN or Inf; the step was not applied."""


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """Apply one bias-corrected Adam update in place.

    ``decay_mask[i]`` switches decoupled weight decay on for parameter ``i``
    (all on by default). Parameters whose grad is ``None`` are left alone.
    Raises NonFiniteError before touching anything if a gradient is not finite.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params, grads and state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {i} has shape {g.shape}, param has {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {i} (shape {p.shape})")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if state.weight_decay and (decay_mask is None or decay_mask[i]):
            update = update + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


def default_no_decay(name: str) -> bool:
    # biases and layer-norm affine terms are exempt from weight decay
    return name.endswith(("bias", ".gamma", ".beta"))


class Adam:
    """Adam over a named parameter collection.

    Tied tensors appear once: parameters are deduplicated by identity so a
    shared embedding is updated a single time per step.
    """

    def __init__(
        self,
        named_params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-6,
        weight_decay: float = 0.01,
        no_decay: Callable[[str], bool] = default_no_decay,
    ):
        seen: set[int] = set()
        self.names: list[str] = []
        self.params: list[Tensor] = []
        for name, t in named_params.items():
            if id(t) in seen:
                continue
            seen.add(id(t))
            self.names.append(name)
            self.params.append(t)
        self.decay_mask = [not no_decay(n) for n in self.names]
        self.state = AdamState.for_params(
            [p.data for p in self.params],
            beta1=beta1, beta2=beta2, epsilon=epsilon, weight_decay=weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr, self.decay_mask)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for i, name in enumerate(self.names):
            self.state.m[i][...] = arrays[f"adam.m/{name}"]
            self.state.v[i][...] = arrays[f"adam.v/{name}"]
        self.state.step = step


def linear_warmup_decay(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Learning rate after ``step`` completed updates.

    Rises linearly from 0 to ``peak_lr`` over ``warmup_steps``, then falls
    linearly to 0 at ``total_steps``.
    """
    if step < 0 or total_steps <= 0:
        raise ValueError("step must be >= 0 and total_steps > 0")
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps exceeds total_steps")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return peak_lr * (step / warmup_steps)
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * ((total_steps - step) / (total_steps - warmup_steps))
