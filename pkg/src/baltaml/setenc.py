"""Hierarchical set-of-sets encoder and amortized posterior heads.

Instances of each class are embedded and pooled into a class vector ``s_c``;
class vectors are embedded and pooled again into the task vector ``v``.
Pooling concatenates per-feature mean, population variance and the set size
(as ``log(1 + N)``), then mixes those statistics channels with a small learned
map shared across features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, const, leaf

__all__ = [
    "EncoderParams",
    "BalancingPosterior",
    "SetRepresentation",
    "init_encoder",
    "pool_statistics",
    "encode_class",
    "encode_task",
    "posterior_params",
    "encode_episode",
    "SIGMA_FLOOR",
]

SIGMA_FLOOR = 1e-4
N_MIX = 4


@dataclass
class EncoderParams:
    """All inference-network weights, keyed by name in creation order."""

    weights: dict[str, Tensor]
    higher_moments: bool = False

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.weights.items())

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def mlp(self, prefix: str) -> list[Tensor]:
        out, i = [], 0
        while f"{prefix}.{i}.W" in self.weights:
            out += [self.weights[f"{prefix}.{i}.W"], self.weights[f"{prefix}.{i}.b"]]
            i += 1
        return out

    def with_values(self, values: dict[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams({k: leaf(values[k]) for k in self.weights}, self.higher_moments)


@dataclass
class BalancingPosterior:
    """Diagonal gaussian over the pre-transform balancing variables."""

    omega_mu: Tensor
    omega_sigma: Tensor
    gamma_mu: Tensor
    gamma_sigma: Tensor
    z_mu: Tensor
    z_sigma: Tensor

    def detached(self) -> "BalancingPosterior":
        return BalancingPosterior(*(t.detach() for t in self.parts()))

    def parts(self) -> tuple[Tensor, ...]:
        return (self.omega_mu, self.omega_sigma, self.gamma_mu, self.gamma_sigma, self.z_mu, self.z_sigma)


@dataclass
class SetRepresentation:
    class_reprs: list[Tensor]
    task_repr: Tensor


def _linear_init(rng, fan_in, fan_out, scale=1.0):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_encoder(
    in_dim: int,
    n_layers: int,
    n_modulated: int,
    rng: np.random.Generator,
    nn1: tuple[int, ...] = (64, 64),
    nn2: tuple[int, ...] = (128, 32),
    head_hidden: int = 64,
    higher_moments: bool = False,
    head_scale: float = 0.1,
    sigma_bias: float = -3.0,
) -> EncoderParams:
    """Random inference network.

    Output layers of the heads start small (``head_scale``) and the raw sigma
    bias starts at ``sigma_bias`` so early posteriors sit near the identity
    balancing with little noise.
    """
    n_stats = 5 if higher_moments else 3
    w: dict[str, Tensor] = {}

    def mlp(prefix, widths):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W, bias = _linear_init(rng, a, b)
            w[f"{prefix}.{i}.W"], w[f"{prefix}.{i}.b"] = leaf(W), leaf(bias)

    def mix(prefix):
        W, b = _linear_init(rng, n_stats, N_MIX)
        w[f"{prefix}.W"], w[f"{prefix}.b"] = leaf(W), leaf(b)

    def head(prefix, in_w, n_out):
        W, b = _linear_init(rng, in_w, head_hidden)
        w[f"{prefix}.0.W"], w[f"{prefix}.0.b"] = leaf(W), leaf(b)
        W, b = _linear_init(rng, head_hidden, 2 * n_out, head_scale)
        b[n_out:] = sigma_bias
        w[f"{prefix}.1.W"], w[f"{prefix}.1.b"] = leaf(W), leaf(b)

    mlp("nn1", [in_dim, *nn1])
    mix("mix1")
    s_dim = nn1[-1] * N_MIX
    mlp("nn2", [s_dim, *nn2])
    mix("mix2")
    v_dim = nn2[-1] * N_MIX
    head("omega_head", s_dim, 1)
    head("gamma_head", v_dim, n_layers)
    head("z_head", v_dim, max(n_modulated, 1))
    return EncoderParams(w, higher_moments)


def _mlp(params: list[Tensor], h: Tensor, final_relu: bool = False) -> Tensor:
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1 or final_relu:
            h = h.relu()
    return h


def pool_statistics(vectors, higher_moments: bool = False) -> Tensor:
    """Statistics block of shape ``(features, channels)`` for a set of rows.

    Channels: mean, population variance, ``log(1 + N)``; with
    ``higher_moments`` also skewness and excess kurtosis (0 when ``N < 3`` /
    ``N < 4`` or the feature is constant).
    """
    h = vectors if isinstance(vectors, Tensor) else const(vectors)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("pool_statistics needs a non-empty set of vectors")
    n, f = h.shape
    mean = h.mean(axis=0)
    var = h.var(axis=0)
    card = const(np.full(f, np.log1p(n)))
    cols = [mean, var, card]
    if higher_moments:
        dev = h - mean
        spread = var.value > 1e-12
        safe_var = var + const(np.where(spread, 0.0, 1.0))
        if n >= 3:
            skew = (dev**3).mean(axis=0) / safe_var**1.5 * const(spread.astype(float))
        else:
            skew = const(np.zeros(f))
        if n >= 4:
            kurt = ((dev**4).mean(axis=0) / safe_var**2 - 3.0) * const(spread.astype(float))
        else:
            kurt = const(np.zeros(f))
        cols += [skew, kurt]
    return concat([c.reshape(f, 1) for c in cols], axis=1)


def _mix(stats: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return (stats @ W + b).relu().reshape(1, stats.shape[0] * N_MIX)


def encode_class(instances, psi: EncoderParams) -> Tensor:
    """Class representation ``s_c`` as a ``(1, 4 * nn1_out)`` row."""
    x = instances if isinstance(instances, Tensor) else const(instances)
    if x.shape[0] == 0:
        raise ValueError("cannot encode an empty class")
    h = _mlp(psi.mlp("nn1"), x)
    return _mix(pool_statistics(h, psi.higher_moments), psi["mix1.W"], psi["mix1.b"])


def encode_task(class_reprs: list[Tensor], psi: EncoderParams) -> Tensor:
    """Task representation ``v`` as a ``(1, 4 * nn2_out)`` row."""
    if len(class_reprs) < 2:
        raise ValueError(f"task encoding needs at least 2 classes, got {len(class_reprs)}")
    S = concat(class_reprs, axis=0)
    h = _mlp(psi.mlp("nn2"), S)
    return _mix(pool_statistics(h, psi.higher_moments), psi["mix2.W"], psi["mix2.b"])


def _head(psi: EncoderParams, prefix: str, x: Tensor) -> tuple[Tensor, Tensor]:
    out = _mlp(psi.mlp(prefix), x)
    out = out.reshape(out.size)
    k = out.size // 2
    return out[:k], out[k:].softplus() + SIGMA_FLOOR


def posterior_params(
    class_reprs: list[Tensor],
    task_repr: Tensor,
    psi: EncoderParams,
    n_layers: int,
    n_modulated: int,
) -> BalancingPosterior:
    # the omega head runs on each class row separately so a class permutation
    # permutes its outputs bit-exactly
    mus, sigmas = zip(*(_head(psi, "omega_head", s) for s in class_reprs))
    g_mu, g_sigma = _head(psi, "gamma_head", task_repr)
    z_mu, z_sigma = _head(psi, "z_head", task_repr)
    if g_mu.size != n_layers:
        raise ValueError(f"gamma head emits {g_mu.size} layers, model has {n_layers}")
    if n_modulated == 0:
        z_mu, z_sigma = z_mu[:0], z_sigma[:0]
    elif z_mu.size != n_modulated:
        raise ValueError(f"z head emits {z_mu.size} units, layout needs {n_modulated}")
    return BalancingPosterior(concat(mus), concat(sigmas), g_mu, g_sigma, z_mu, z_sigma)


def encode_episode(episode, psi: EncoderParams, n_layers: int, n_modulated: int):
    """Full pipeline: support set to ``(SetRepresentation, BalancingPosterior)``."""
    reprs = [encode_class(episode.support_class(c), psi) for c in range(episode.n_classes)]
    v = encode_task(reprs, psi)
    post = posterior_params(reprs, v, psi, n_layers, n_modulated)
    return SetRepresentation(reprs, v), post
