"""Balanced inner-loop adaptation, variational objective and predictors.

Each episode's support set is encoded into a diagonal gaussian over three
pre-transform balancing variables: class weights (softmax), per-layer step
multipliers (exp) and an initialization modulator. One draw sets up the
inner loop

    theta_0 = modulate(theta, z)
    theta_k = theta_{k-1} - gamma_l * alpha * sum_c omega_c * grad L_c(theta_{k-1})

and the query NLL of ``theta_K`` plus a KL penalty is the meta-training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode
from .setenc import BalancingPosterior, EncoderParams, encode_episode
from .taskmodel import MetaParams, flatten, forward, instance_nll, layer_of, modulate
from .tensor import Tensor, const, grad, leaf

__all__ = [
    "METHODS",
    "VariantConfig",
    "BalancingSample",
    "AdaptState",
    "DivergenceError",
    "ObjectiveResult",
    "sample_balancing",
    "mean_balancing",
    "inner_adapt",
    "baseline_update",
    "kl_divergence",
    "l2_penalty",
    "meta_objective",
    "predict_mc",
    "predict_naive",
    "predict",
    "displacement_diagnostic",
    "expected_balancing",
]

METHODS = ("taml", "maml", "metasgd", "metasgd_inv_n")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"inner loop diverged at step {step} (loss {loss!r})")


@dataclass
class VariantConfig:
    use_omega: bool = True
    use_gamma: bool = True
    use_z: bool = True
    deterministic: bool = False
    mc_train: int = 1
    mc_test: int = 10
    inner_steps_train: int = 5
    inner_steps_test: int = 10
    method: str = "taml"
    # rejected design kept for ablations: gamma = exp(-softplus(raw)) in (0, 1)
    gamma_decay: bool = False

    def __post_init__(self):
        if self.mc_train < 1 or self.mc_test < 1:
            raise ValueError("MC sample sizes must be >= 1")
        if self.inner_steps_train < 0 or self.inner_steps_test < 0:
            raise ValueError("inner step counts must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    @property
    def any_balancing(self) -> bool:
        return self.method == "taml" and (self.use_omega or self.use_gamma or self.use_z)


@dataclass
class BalancingSample:
    omega: Tensor
    gamma: Tensor | None
    z: Tensor | None
    raw: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)

    @property
    def z_weights(self) -> np.ndarray | None:
        return None if self.z is None else 1.0 + self.z.value

    @property
    def z_biases(self) -> np.ndarray | None:
        return None if self.z is None else self.z.value.copy()

    def detached(self) -> "BalancingSample":
        return BalancingSample(
            self.omega.detach(),
            None if self.gamma is None else self.gamma.detach(),
            None if self.z is None else self.z.detach(),
            {k: v.detach() for k, v in self.raw.items()},
            dict(self.noise),
        )


@dataclass
class AdaptState:
    theta_0: list[Tensor]
    theta: list[Tensor]
    step: int
    losses: list[float] = field(default_factory=list)


def _transform_gamma(raw: Tensor, decay: bool) -> Tensor:
    return (-raw.softplus()).exp() if decay else raw.exp()


def sample_balancing(
    posterior: BalancingPosterior,
    rng: np.random.Generator | None,
    variant: VariantConfig,
    noise: dict | None = None,
) -> BalancingSample:
    """Reparameterized draw ``raw = mu + sigma * eps`` pushed through transforms.

    ``noise`` freezes ``eps`` per variable (keys ``omega``, ``gamma``, ``z``).
    Disabled variables take identity values: uniform omega, unit gamma, no z.
    """
    C = posterior.omega_mu.size
    raw, used = {}, {}

    def draw(key, mu, sigma):
        if variant.deterministic:
            return mu
        if noise is not None and key in noise:
            eps = np.asarray(noise[key], dtype=np.float64)
        else:
            eps = rng.standard_normal(mu.shape)
        used[key] = eps
        return mu + sigma * const(eps)

    if variant.use_omega:
        raw["omega"] = draw("omega", posterior.omega_mu, posterior.omega_sigma)
        omega = raw["omega"].softmax(axis=0)
    else:
        omega = const(np.full(C, 1.0 / C))
    gamma = None
    if variant.use_gamma:
        raw["gamma"] = draw("gamma", posterior.gamma_mu, posterior.gamma_sigma)
        gamma = _transform_gamma(raw["gamma"], variant.gamma_decay)
    z = None
    if variant.use_z and posterior.z_mu.size:
        raw["z"] = z = draw("z", posterior.z_mu, posterior.z_sigma)
    return BalancingSample(omega, gamma, z, raw, used)


def mean_balancing(posterior: BalancingPosterior, variant: VariantConfig) -> BalancingSample:
    """Posterior means pushed through the transforms (no sampling)."""
    det = VariantConfig(**{**variant.__dict__, "deterministic": True})
    return sample_balancing(posterior, None, det)


def _descend(
    theta0: list[Tensor],
    alphas: list[Tensor],
    layer_scale: Tensor | None,
    weights: Tensor,
    x: np.ndarray,
    y: np.ndarray,
    K: int,
    create_graph: bool,
) -> AdaptState:
    """K steps on the instance-weighted support loss ``sum_i w_i * nll_i``."""
    if not create_graph:
        alphas = [a.detach() for a in alphas]
        weights = weights.detach()
        layer_scale = None if layer_scale is None else layer_scale.detach()
    scales = None
    if layer_scale is not None:
        scales = [layer_scale[l] for l in range(layer_scale.size)]
    xs = const(x)
    theta = list(theta0)
    losses = []
    for k in range(1, K + 1):
        if not create_graph:
            theta = [leaf(t.value) for t in theta]
        loss = (instance_nll(forward(theta, xs), y) * weights).sum()
        lv = loss.item()
        losses.append(lv)
        if not np.isfinite(lv) or lv > DIVERGENCE_LIMIT:
            raise DivergenceError(k, lv)
        grads = grad(loss, theta, as_graph=create_graph)
        new = []
        for i, (p, a, g) in enumerate(zip(theta, alphas, grads)):
            step = a * g
            if scales is not None:
                step = step * scales[layer_of(i)]
            new.append(p - step)
        theta = new
    if not create_graph:
        theta = [t.detach() for t in theta]
    return AdaptState(list(theta0), theta, K, losses)


def _class_weights(omega: Tensor, episode: Episode) -> Tensor:
    counts = episode.counts
    if np.any(counts == 0):
        raise ValueError(f"every class needs support instances, counts {counts.tolist()}")
    y = episode.support_y
    return omega.gather_rows(y) / const(counts[y].astype(np.float64))


def inner_adapt(
    params: MetaParams,
    sample: BalancingSample,
    episode: Episode,
    K: int,
    create_graph: bool = True,
) -> AdaptState:
    """Balanced K-step adaptation starting from the modulated initialization.

    The class-weighted gradient ``sum_c omega_c * grad(mean loss of class c)``
    is taken as the gradient of ``sum_i omega_{y_i} / N_{y_i} * nll_i``.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if not create_graph:
        sample = sample.detached()
    theta0 = modulate(params.theta(), sample.z, params.modulation_layout)
    w = _class_weights(sample.omega, episode)
    return _descend(theta0, params.alphas(), sample.gamma, w, episode.support_x, episode.support_y, K, create_graph)


def baseline_update(
    params: MetaParams,
    episode: Episode,
    mode: str,
    K: int,
    create_graph: bool = True,
) -> AdaptState:
    """MAML, Meta-SGD and Meta-SGD with 1/N class weighting.

    ``maml`` and ``metasgd`` step on the pooled mean support loss, with a
    scalar or per-coordinate step. ``metasgd_inv_n`` takes each class's share
    of the pooled-mean gradient and divides it by that class's size.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if mode == "maml" and not params.scalar_alpha:
        raise ValueError("maml mode needs a scalar alpha")
    counts = episode.counts
    if np.any(counts == 0):
        raise ValueError(f"every class needs support instances, counts {counts.tolist()}")
    y = episode.support_y
    n = len(y)
    if mode in ("maml", "metasgd"):
        w = np.full(n, 1.0 / n)
    elif mode == "metasgd_inv_n":
        w = 1.0 / (n * counts[y].astype(np.float64))
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    return _descend(params.theta(), params.alphas(), None, const(w), episode.support_x, y, K, create_graph)


def kl_divergence(posterior: BalancingPosterior, variant: VariantConfig | None = None) -> Tensor:
    """KL from the diagonal posterior to N(0, I), summed over enabled variables."""
    parts = _enabled_parts(posterior, variant)
    total = const(0.0)
    for mu, sigma in parts:
        if sigma.size == 0:
            continue
        if np.any(sigma.value <= 0):
            raise ValueError("posterior sigma must be strictly positive")
        total = total + ((mu * mu + sigma * sigma - 1.0 - sigma.log() * 2.0) * 0.5).sum()
    return total


def l2_penalty(posterior: BalancingPosterior, variant: VariantConfig | None = None) -> Tensor:
    """``0.5 * ||mu||^2``: the deterministic stand-in for the KL term."""
    total = const(0.0)
    for mu, _ in _enabled_parts(posterior, variant):
        if mu.size:
            total = total + (mu * mu).sum() * 0.5
    return total


def _enabled_parts(posterior, variant):
    v = variant or VariantConfig()
    out = []
    if v.use_omega:
        out.append((posterior.omega_mu, posterior.omega_sigma))
    if v.use_gamma:
        out.append((posterior.gamma_mu, posterior.gamma_sigma))
    if v.use_z:
        out.append((posterior.z_mu, posterior.z_sigma))
    return out


@dataclass
class ObjectiveResult:
    loss: Tensor
    nll: float
    reg: float
    posterior: BalancingPosterior | None
    samples: list[BalancingSample]


def meta_objective(
    episode: Episode,
    params: MetaParams,
    psi: EncoderParams | None,
    variant: VariantConfig,
    rng: np.random.Generator | None,
    noise: list[dict] | None = None,
) -> ObjectiveResult:
    """Query NLL averaged over MC draws plus ``KL / (N + M)``.

    Deterministic variants replace the KL by :func:`l2_penalty` with the same
    weight. Baseline methods skip the encoder and carry no penalty.
    """
    if episode.n_query == 0:
        raise ValueError("episode has no query instances")
    qx, qy = const(episode.query_x), episode.query_y
    K = variant.inner_steps_train
    if variant.method != "taml":
        state = baseline_update(params, episode, variant.method, K)
        nll = instance_nll(forward(state.theta, qx), qy).mean()
        return ObjectiveResult(nll, nll.item(), 0.0, None, [])

    post = None
    if variant.any_balancing:
        _, post = encode_episode(episode, psi, params.n_layers, params.n_modulated)
    else:
        post = _identity_posterior(episode, params)
    S = 1 if variant.deterministic else variant.mc_train
    total, samples = None, []
    for s in range(S):
        sample = sample_balancing(post, rng, variant, None if noise is None else noise[s])
        samples.append(sample)
        state = inner_adapt(params, sample, episode, K)
        nll = instance_nll(forward(state.theta, qx), qy).mean()
        total = nll if total is None else total + nll
    lik = total * (1.0 / S)
    scale = 1.0 / (episode.n_support + episode.n_query)
    if not variant.any_balancing:
        reg = const(0.0)
    elif variant.deterministic:
        reg = l2_penalty(post, variant) * scale
    else:
        reg = kl_divergence(post, variant) * scale
    loss = lik + reg
    if not np.isfinite(loss.item()) or loss.item() > DIVERGENCE_LIMIT:
        raise DivergenceError(K, loss.item())
    return ObjectiveResult(loss, lik.item(), reg.item(), post, samples)


def _identity_posterior(episode: Episode, params: MetaParams) -> BalancingPosterior:
    C, L, U = episode.n_classes, params.n_layers, params.n_modulated
    z, o = np.zeros, np.ones
    return BalancingPosterior(const(z(C)), const(o(C)), const(z(L)), const(o(L)), const(z(U)), const(o(U)))


def _detached_posterior(episode, params, psi, variant) -> BalancingPosterior:
    if not variant.any_balancing:
        return _identity_posterior(episode, params)
    _, post = encode_episode(episode, _detached_psi(psi), params.n_layers, params.n_modulated)
    return post.detached()


def _detached_psi(psi: EncoderParams) -> EncoderParams:
    return EncoderParams({k: t.detach() for k, t in psi.weights.items()}, psi.higher_moments)


def _probs(theta, x) -> np.ndarray:
    logits = forward(theta, x).value
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_mc(
    episode: Episode,
    params: MetaParams,
    psi: EncoderParams | None,
    variant: VariantConfig,
    S: int,
    rng: np.random.Generator | None,
    posterior: BalancingPosterior | None = None,
) -> np.ndarray:
    """Average of ``S`` per-draw predictive distributions over the query set."""
    if S < 1:
        raise ValueError("S must be >= 1")
    K = variant.inner_steps_test
    if variant.method != "taml":
        state = baseline_update(params, episode, variant.method, K, create_graph=False)
        return _probs(state.theta, episode.query_x)
    post = posterior if posterior is not None else _detached_posterior(episode, params, psi, variant)
    acc = None
    for _ in range(1 if variant.deterministic else S):
        sample = sample_balancing(post, rng, variant)
        state = inner_adapt(params, sample, episode, K, create_graph=False)
        p = _probs(state.theta, episode.query_x)
        acc = p if acc is None else acc + p
    return acc / (1 if variant.deterministic else S)


def predict_naive(
    episode: Episode,
    params: MetaParams,
    psi: EncoderParams | None,
    variant: VariantConfig,
    posterior: BalancingPosterior | None = None,
) -> np.ndarray:
    """Single adaptation at the posterior means."""
    det = VariantConfig(**{**variant.__dict__, "deterministic": True})
    return predict_mc(episode, params, psi, det, 1, None, posterior)


def predict(episode, params, psi, variant, mode: str, S: int, rng, posterior=None) -> np.ndarray:
    if mode == "mc":
        return predict_mc(episode, params, psi, variant, S, rng, posterior)
    if mode == "naive":
        return predict_naive(episode, params, psi, variant, posterior)
    raise ValueError(f"predict mode must be 'mc' or 'naive', got {mode!r}")


def displacement_diagnostic(
    episode: Episode,
    params: MetaParams,
    psi: EncoderParams,
    variant: VariantConfig,
    S: int,
    K: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Distance from the mean-modulated init to adapted parameters.

    Returns ``(d_mean_first, d_mean_outside)``: adaptation from the mean
    modulator, versus the average of adaptations from ``S`` modulator draws.
    Draws are antithetic pairs so their mean equals the posterior mean; class
    weights and step multipliers stay at their means in both cases.
    """
    if S < 2:
        raise ValueError("S must be >= 2")
    post = _detached_posterior(episode, params, psi, variant)
    mean = mean_balancing(post, variant)
    theta = [t.detach() for t in params.theta()]
    ref = flatten(modulate(theta, mean.z, params.modulation_layout))
    first = flatten(inner_adapt(params, mean, episode, K, create_graph=False).theta)
    d_first = float(np.linalg.norm(first - ref))
    if mean.z is None:
        return d_first, d_first
    half = (S + 1) // 2
    eps = rng.standard_normal((half, post.z_mu.size))
    eps = np.concatenate([eps, -eps])[:S]
    acc = np.zeros_like(first)
    for e in eps:
        z = post.z_mu + post.z_sigma * const(e)
        sample = BalancingSample(mean.omega, mean.gamma, z)
        acc += flatten(inner_adapt(params, sample, episode, K, create_graph=False).theta)
    d_out = float(np.linalg.norm(acc / S - ref))
    return d_first, d_out


def expected_balancing(
    posterior: BalancingPosterior,
    variant: VariantConfig,
    rng: np.random.Generator,
    n_draws: int = 256,
) -> dict[str, np.ndarray]:
    """Posterior expectations of the transformed balancing variables.

    ``E[gamma]`` is the closed-form lognormal mean; ``E[omega]`` is a Monte
    Carlo average of the softmax over ``n_draws`` draws.
    """
    C = posterior.omega_mu.size
    L = posterior.gamma_mu.size
    if variant.use_omega and not variant.deterministic:
        raw = posterior.omega_mu.value + posterior.omega_sigma.value * rng.standard_normal((n_draws, C))
        e = np.exp(raw - raw.max(axis=1, keepdims=True))
        omega = (e / e.sum(axis=1, keepdims=True)).mean(axis=0)
    elif variant.use_omega:
        e = np.exp(posterior.omega_mu.value - posterior.omega_mu.value.max())
        omega = e / e.sum()
    else:
        omega = np.full(C, 1.0 / C)
    if not variant.use_gamma:
        gamma = np.ones(L)
    elif variant.gamma_decay:
        gamma = _transform_gamma(posterior.gamma_mu.detach(), True).value
    elif variant.deterministic:
        gamma = np.exp(posterior.gamma_mu.value)
    else:
        gamma = np.exp(posterior.gamma_mu.value + 0.5 * posterior.gamma_sigma.value**2)
    return {"omega": omega, "gamma": gamma}
