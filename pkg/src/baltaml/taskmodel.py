"""MLP task network with per-class losses and initialization modulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, const, leaf

__all__ = [
    "MetaParams",
    "LayoutError",
    "init_params",
    "forward",
    "instance_nll",
    "class_loss",
    "pooled_loss",
    "modulate",
    "layer_of",
    "flatten",
]


class LayoutError(ValueError):
    pass


@dataclass
class MetaParams:
    """Shared meta-knowledge: layer weights, step sizes, modulation layout.

    ``layers[l] = (W, b)`` with ``W`` of shape ``(fan_in, fan_out)``.
    ``alpha`` is either a single scalar tensor or one tensor per entry of
    :meth:`theta`, matching shapes (learned per-coordinate steps).
    """

    layers: list[tuple[Tensor, Tensor]]
    alpha: list[Tensor]
    modulation_layout: list[int]

    def __post_init__(self):
        for l in range(1, len(self.layers)):
            if self.layers[l][0].shape[0] != self.layers[l - 1][0].shape[1]:
                raise LayoutError(
                    f"layer {l} expects width {self.layers[l][0].shape[0]}, "
                    f"previous layer emits {self.layers[l - 1][0].shape[1]}"
                )
        n_alpha = sum(a.size for a in self.alpha)
        if n_alpha != 1 and n_alpha != self.n_coords:
            raise LayoutError(f"alpha has {n_alpha} entries, expected 1 or {self.n_coords}")
        if len(self.modulation_layout) != len(self.layers):
            raise LayoutError("modulation_layout needs one entry per layer")
        for (W, _), n in zip(self.layers, self.modulation_layout):
            if n not in (0, W.shape[1]):
                raise LayoutError(f"layer modulation count {n} must be 0 or {W.shape[1]}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_coords(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    @property
    def n_modulated(self) -> int:
        return sum(self.modulation_layout)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    @property
    def scalar_alpha(self) -> bool:
        return len(self.alpha) == 1 and self.alpha[0].size == 1

    def theta(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def alphas(self) -> list[Tensor]:
        """Step tensor per theta entry (the scalar is repeated in scalar mode)."""
        if self.scalar_alpha:
            return [self.alpha[0]] * (2 * self.n_layers)
        return list(self.alpha)

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for l, (W, b) in enumerate(self.layers):
            out += [(f"theta.{l}.W", W), (f"theta.{l}.b", b)]
        if self.scalar_alpha:
            out.append(("alpha", self.alpha[0]))
        else:
            for l in range(self.n_layers):
                out += [(f"alpha.{l}.W", self.alpha[2 * l]), (f"alpha.{l}.b", self.alpha[2 * l + 1])]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def with_values(self, values: dict[str, np.ndarray]) -> "MetaParams":
        """New leaves holding ``values`` (keyed like :meth:`named`)."""
        n = self.n_layers
        layers = [(leaf(values[f"theta.{l}.W"]), leaf(values[f"theta.{l}.b"])) for l in range(n)]
        if self.scalar_alpha:
            alpha = [leaf(values["alpha"])]
        else:
            alpha = []
            for l in range(n):
                alpha += [leaf(values[f"alpha.{l}.W"]), leaf(values[f"alpha.{l}.b"])]
        return MetaParams(layers, alpha, list(self.modulation_layout))


def init_params(
    arch: list[int],
    rng: np.random.Generator,
    alpha_init: float = 0.01,
    scalar_alpha: bool = False,
    modulate_layers: bool = True,
) -> MetaParams:
    """Glorot-uniform weights, zero biases, constant step sizes."""
    if len(arch) < 2:
        raise ValueError(f"architecture needs at least input and output widths, got {arch}")
    if any(int(w) <= 0 for w in arch):
        raise ValueError(f"layer widths must be positive, got {arch}")
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((leaf(W), leaf(np.zeros(fan_out))))
    if scalar_alpha:
        alpha = [leaf(np.array(alpha_init))]
    else:
        alpha = [leaf(np.full(t.shape, alpha_init)) for pair in layers for t in pair]
    layout = [W.shape[1] if modulate_layers else 0 for W, _ in layers]
    return MetaParams(layers, alpha, layout)


def forward(theta: list[Tensor], inputs) -> Tensor:
    """Logits of the MLP: relu hidden layers, linear output layer."""
    h = inputs if isinstance(inputs, Tensor) else const(inputs)
    n_layers = len(theta) // 2
    if h.ndim != 2 or h.shape[1] != theta[0].shape[0]:
        raise LayoutError(f"inputs of shape {h.shape} do not match first layer width {theta[0].shape[0]}")
    for l in range(n_layers):
        h = h @ theta[2 * l] + theta[2 * l + 1]
        if l < n_layers - 1:
            h = h.relu()
    return h


def instance_nll(logits: Tensor, labels) -> Tensor:
    """Per-instance negative log-likelihood, shape (batch,)."""
    return logits.cross_entropy(labels)


def class_loss(theta: list[Tensor], episode, c: int) -> Tensor:
    """Mean NLL over the support instances of class ``c``."""
    x = episode.support_class(c)
    if len(x) == 0:
        raise ValueError(f"class {c} has no support instances")
    return instance_nll(forward(theta, x), np.full(len(x), c)).mean()


def pooled_loss(theta: list[Tensor], x, y) -> Tensor:
    return instance_nll(forward(theta, x), y).mean()


def modulate(theta: list[Tensor], z: Tensor | None, layout: list[int]) -> list[Tensor]:
    """Scale each unit's incoming weights by ``1 + z`` and shift its bias by ``z``."""
    if z is None:
        return list(theta)
    if z.ndim != 1 or z.size != sum(layout):
        raise LayoutError(f"z has shape {z.shape}, layout needs {sum(layout)} entries")
    out = []
    start = 0
    for l, n in enumerate(layout):
        W, b = theta[2 * l], theta[2 * l + 1]
        if n == 0:
            out += [W, b]
            continue
        zl = z[start : start + n]
        start += n
        out += [W * (zl + 1.0), b + zl]
    return out


def layer_of(index: int) -> int:
    """Layer owning entry ``index`` of a flat theta list."""
    return index // 2


def flatten(theta: list[Tensor]) -> np.ndarray:
    return np.concatenate([t.value.reshape(-1) for t in theta])
