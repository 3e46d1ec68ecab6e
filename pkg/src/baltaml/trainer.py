"""Meta-training driver, evaluation, checkpoints and ablation sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .episodes import (
    CLASS_IMBALANCE,
    TASK_IMBALANCE,
    Episode,
    EpisodeDistribution,
    distribution_to_dict,
    load_pool,
    make_ood_pool,
    sample_episode,
    synth_task_family,
)
from .setenc import EncoderParams, init_encoder
from .taml import (
    DivergenceError,
    VariantConfig,
    _detached_posterior,
    displacement_diagnostic,
    expected_balancing,
    meta_objective,
    predict,
)
from .taskmodel import MetaParams, init_params
from .tensor import grad

log = logging.getLogger(__name__)

__all__ = [
    "CHECKPOINT_VERSION",
    "ConfigError",
    "CheckpointError",
    "TrainingAborted",
    "TrainConfig",
    "Adam",
    "Checkpoint",
    "EvalReport",
    "TrainResult",
    "build_model",
    "build_pools",
    "meta_train",
    "evaluate",
    "ablation_sweep",
    "save_checkpoint",
    "load_checkpoint",
    "load_config",
    "ci95",
    "gamma_size_trend",
    "omega_tail_gap",
    "parse_axes",
    "resolve_pool",
    "MetricsWriter",
    "METRICS_HEADER",
]

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("run_id", "seed", "cell", "iter", "split", "metric", "value")
SKIP_ABORT_FRACTION = 0.5


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: VariantConfig = field(default_factory=VariantConfig)
    dist: EpisodeDistribution = field(default_factory=EpisodeDistribution)
    meta_batch: int = 4
    outer_lr: float = 1e-3
    outer_optimizer: dict = field(default_factory=lambda: {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    total_iters: int = 2000
    eval_every: int = 100
    patience: int = 10
    seed: int = 0
    arch: list = field(default_factory=lambda: [32, 32])
    family: str = "gaussian_blobs"
    family_params: dict = field(default_factory=dict)
    ood_shift: dict = field(default_factory=lambda: {"kind": "translate", "offset": 1.0})
    val_episodes: int = 600
    encoder: dict = field(default_factory=dict)
    alpha_init: float = 0.01

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = _strict(VariantConfig, self.variant, "variant")
        if isinstance(self.dist, dict):
            self.dist = _strict(EpisodeDistribution, self.dist, "dist")
        if self.meta_batch < 1:
            raise ConfigError("meta_batch must be >= 1")
        if not self.outer_lr > 0:
            raise ConfigError("outer_lr must be positive")
        if self.eval_every < 1 or self.total_iters < self.eval_every and self.total_iters != 0:
            raise ConfigError("need total_iters >= eval_every >= 1")
        unknown = set(self.outer_optimizer) - {"beta1", "beta2", "eps"}
        if unknown:
            raise ConfigError(f"unknown outer_optimizer keys {sorted(unknown)}")
        unknown = set(self.encoder) - {"nn1", "nn2", "head_hidden", "higher_moments", "head_scale", "sigma_bias"}
        if unknown:
            raise ConfigError(f"unknown encoder keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist"] = distribution_to_dict(self.dist)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _strict(cls, d, "config")


def _strict(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def load_config(path) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg} at offset {exc.pos}") from None
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# outer optimizer


class Adam:
    """Adaptive-moment optimizer over named numpy arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = values[k] - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


# ---------------------------------------------------------------------------
# model / pool construction


def build_pools(config: TrainConfig) -> dict:
    """Train/val/test pools plus a shifted OOD pool, all seeded by the config."""
    rng = np.random.default_rng([config.seed, 101])
    pools = synth_task_family(config.family, config.family_params, rng)
    n_ood = max(pools["test"].n_classes, config.dist.n_classes)
    pools["ood"] = make_ood_pool(
        config.family_params,
        config.ood_shift,
        np.random.default_rng([config.seed, 202]),
        family=config.family,
        n_classes=n_ood,
    )
    return pools


def build_model(config: TrainConfig, in_dim: int) -> tuple[MetaParams, EncoderParams]:
    rng = np.random.default_rng([config.seed, 303])
    arch = [in_dim, *config.arch, config.dist.n_classes]
    params = init_params(arch, rng, alpha_init=config.alpha_init, scalar_alpha=config.variant.method == "maml")
    enc = dict(config.encoder)
    for k in ("nn1", "nn2"):
        if k in enc:
            enc[k] = tuple(enc[k])
    psi = init_encoder(in_dim, params.n_layers, params.n_modulated, rng, **enc)
    return params, psi


def _named_values(params: MetaParams, psi: EncoderParams) -> dict[str, np.ndarray]:
    out = {k: t.value for k, t in params.named()}
    out.update({f"psi.{k}": t.value for k, t in psi.named()})
    return out


def _trainable(params: MetaParams, psi: EncoderParams, variant: VariantConfig) -> list[tuple[str, object]]:
    named = list(params.named())
    if variant.any_balancing:
        named += [(f"psi.{k}", t) for k, t in psi.named()]
    return named


def _assign(params: MetaParams, psi: EncoderParams, values: dict[str, np.ndarray]) -> None:
    for k, t in params.named():
        t.value = np.array(values[k], dtype=np.float64)
    for k, t in psi.named():
        t.value = np.array(values[f"psi.{k}"], dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    values: dict[str, np.ndarray]
    iteration: int = 0
    best_val_acc: float = float("nan")
    best_values: dict[str, np.ndarray] | None = None
    optimizer: dict | None = None
    rng: dict = field(default_factory=dict)
    bad_evals: int = 0
    skipped: int = 0
    trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION

    def model(self, best: bool = True) -> tuple[MetaParams, EncoderParams]:
        """Fresh parameter objects holding the best (or current) values."""
        params, psi = build_model(self.config, _in_dim(self.values))
        src = self.best_values if best and self.best_values is not None else self.values
        _assign(params, psi, src)
        return params, psi


def _in_dim(values) -> int:
    return np.asarray(values["theta.0.W"]).shape[0]


def _arrays_to_json(d: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()} for k, v in d.items()}


def _arrays_from_json(d: dict) -> dict:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    opt = None
    if ck.optimizer is not None:
        opt = {"t": ck.optimizer["t"], "m": _arrays_to_json(ck.optimizer["m"]), "v": _arrays_to_json(ck.optimizer["v"])}
    return {
        "format_version": ck.format_version,
        "config": ck.config.to_dict(),
        "iteration": ck.iteration,
        "best_val_acc": None if math.isnan(ck.best_val_acc) else ck.best_val_acc,
        "bad_evals": ck.bad_evals,
        "skipped": ck.skipped,
        "rng": ck.rng,
        "trace": ck.trace,
        "val_trace": ck.val_trace,
        "values": _arrays_to_json(ck.values),
        "best_values": None if ck.best_values is None else _arrays_to_json(ck.best_values),
        "optimizer": opt,
    }


def save_checkpoint(ck: Checkpoint, path) -> None:
    text = json.dumps(checkpoint_to_dict(ck), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint, {exc.msg} at offset {exc.pos}") from None
    version = d.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    opt = d.get("optimizer")
    if opt is not None:
        opt = {"t": opt["t"], "m": _arrays_from_json(opt["m"]), "v": _arrays_from_json(opt["v"])}
    best = d.get("best_val_acc")
    return Checkpoint(
        config=TrainConfig.from_dict(d["config"]),
        values=_arrays_from_json(d["values"]),
        iteration=d["iteration"],
        best_val_acc=float("nan") if best is None else best,
        best_values=None if d.get("best_values") is None else _arrays_from_json(d["best_values"]),
        optimizer=opt,
        rng=d.get("rng", {}),
        bad_evals=d.get("bad_evals", 0),
        skipped=d.get("skipped", 0),
        trace=d.get("trace", []),
        val_trace=d.get("val_trace", []),
        format_version=version,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    stopped_early: bool = False


def _episode_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, index])


def validation_episodes(config: TrainConfig, pools: dict, n: int | None = None) -> list[Episode]:
    rng = np.random.default_rng([config.seed, 404])
    return [sample_episode(config.dist, pools["val"], rng) for _ in range(config.val_episodes if n is None else n)]


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def meta_train(
    config: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    metrics: Callable | None = None,
) -> TrainResult:
    """Episodic meta-training with validation-based early stopping.

    Every episode's random stream derives from ``(seed, iteration, index)``,
    so a run resumed from a checkpoint replays the uninterrupted run exactly.
    ``stop_at`` halts after that many total iterations (for interrupt tests).
    """
    pools = build_pools(config)
    params, psi = build_model(config, pools["train"].dim)
    opt = Adam(config.outer_lr, **config.outer_optimizer)
    variant = config.variant
    start, best_acc, bad, skipped = 0, float("nan"), 0, 0
    best_values = None
    trace, val_trace = [], []
    if resume is not None:
        _assign(params, psi, resume.values)
        if resume.optimizer is not None:
            opt.load_state(resume.optimizer)
        start, best_acc, bad, skipped = resume.iteration, resume.best_val_acc, resume.bad_evals, resume.skipped
        best_values = resume.best_values
        trace, val_trace = list(resume.trace), list(resume.val_trace)

    named = _trainable(params, psi, variant)
    tensors = [t for _, t in named]
    val_eps = validation_episodes(config, pools) if config.total_iters else []
    window: list[int] = []
    stopped = False
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)

    def snapshot(it):
        return Checkpoint(
            config, {k: v.copy() for k, v in _named_values(params, psi).items()}, it, best_acc,
            best_values, opt.state(), {"seed": config.seed, "next_iteration": it}, bad, skipped,
            list(trace), list(val_trace),
        )

    it = start
    for it in range(start, end):
        total = None
        losses = []
        n_skip = 0
        for b in range(config.meta_batch):
            rng = _episode_rng(config.seed, it, b)
            ep = sample_episode(config.dist, pools["train"], rng)
            try:
                res = meta_objective(ep, params, psi, variant, rng)
                gs = grad(res.loss, tensors)
            except DivergenceError as exc:
                n_skip += 1
                log.warning("iteration %d episode %d skipped: %s", it, b, exc)
                continue
            losses.append(res.loss.item())
            gv = [g.value for g in gs]
            total = gv if total is None else [a + g for a, g in zip(total, gv)]
        skipped += n_skip
        window = (window + [n_skip])[-config.eval_every :]
        if sum(window) > SKIP_ABORT_FRACTION * len(window) * config.meta_batch:
            raise TrainingAborted(
                f"{sum(window)} of the last {len(window) * config.meta_batch} episodes diverged (iteration {it})"
            )
        if total is not None:
            n_ok = len(losses)
            values = {k: t.value for k, t in named}
            new = opt.step(values, {k: g / n_ok for (k, _), g in zip(named, total)})
            for k, t in named:
                t.value = new[k]
            trace.append(float(np.mean(losses)))
            if metrics:
                metrics(it + 1, "train", "loss", trace[-1])
        else:
            trace.append(float("nan"))

        if (it + 1) % config.eval_every == 0:
            acc = float(np.mean([
                _accuracy(predict(ep, params, psi, variant, "naive", 1, None), ep.query_y) for ep in val_eps
            ]))
            val_trace.append([it + 1, acc])
            if metrics:
                metrics(it + 1, "val", "accuracy", acc)
            if math.isnan(best_acc) or acc > best_acc:
                best_acc, bad = acc, 0
                best_values = {k: v.copy() for k, v in _named_values(params, psi).items()}
                if out_dir is not None:
                    save_checkpoint(snapshot(it + 1), Path(out_dir) / "best.json")
            else:
                bad += 1
            if out_dir is not None:
                save_checkpoint(snapshot(it + 1), Path(out_dir) / "last.json")
            log.info("iter %d loss %.4f val acc %.4f (best %.4f)", it + 1, trace[-1], acc, best_acc)
            if bad >= config.patience:
                stopped = True
                it += 1
                break
    else:
        it = end

    last = snapshot(it if config.total_iters else 0)
    if best_values is None:
        best_values = {k: v.copy() for k, v in last.values.items()}
    best = Checkpoint(**{**last.__dict__, "best_values": best_values})
    if out_dir is not None:
        save_checkpoint(last, Path(out_dir) / "last.json")
        save_checkpoint(best, Path(out_dir) / "best.json")
    return TrainResult(best, last, stopped)


# ---------------------------------------------------------------------------
# evaluation


def ci95(values) -> float:
    """Normal-approximation 95% half-width, ``1.96 * std / sqrt(n)`` (population std)."""
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std() / math.sqrt(len(v)))


@dataclass
class EvalReport:
    accuracies: list[float]
    mean_accuracy: float
    ci95: float
    per_class_accuracy: list[float]
    gamma_mean: list[float]
    omega_vs_count: list[tuple[int, float]]
    class_acc_vs_count: list[tuple[int, float]]
    task_sizes: list[int]
    task_gamma: list[list[float]]
    displacement: list[tuple[float, float]]
    n_requested: int
    n_skipped: int
    mode: str
    samples: int

    def scalars(self) -> dict[str, float]:
        out = {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "n_episodes": float(len(self.accuracies)),
            "n_skipped": float(self.n_skipped),
        }
        for l, g in enumerate(self.gamma_mean):
            out[f"gamma_mean_{l}"] = g
        out["omega_small_minus_large"] = omega_tail_gap(self.omega_vs_count)
        if self.displacement:
            d = np.asarray(self.displacement)
            out["d_mean_first"] = float(d[:, 0].mean())
            out["d_mean_outside"] = float(d[:, 1].mean())
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scalars"] = self.scalars()
        return d


def omega_tail_gap(pairs) -> float:
    """Mean E[omega] of each imbalanced episode's smallest class minus its largest.

    ``pairs`` is a flat list of ``(episode, N_c, E[omega_c])`` or ``(N_c, E[omega_c])``
    grouped per episode in blocks; only blocks with distinct min/max counts count.
    """
    gaps = []
    for block in _episode_blocks(pairs):
        counts = np.array([p[0] for p in block])
        om = np.array([p[1] for p in block])
        if counts.min() == counts.max():
            continue
        gaps.append(om[counts == counts.min()].mean() - om[counts == counts.max()].mean())
    return float(np.mean(gaps)) if gaps else float("nan")


def _episode_blocks(pairs):
    blocks, cur, last = [], [], None
    for p in pairs:
        if len(p) == 3:
            key, rest = p[0], p[1:]
        else:
            key, rest = None, p
        if cur and key != last:
            blocks.append(cur)
            cur = []
        cur.append(rest)
        last = key
    if cur:
        blocks.append(cur)
    return blocks


def evaluate(
    checkpoint: Checkpoint,
    pool,
    n_episodes: int,
    mode: str = "mc",
    S: int = 10,
    seed: int = 0,
    dist: EpisodeDistribution | None = None,
    regime: str | None = None,
    shots=None,
    predictor: Callable | None = None,
    n_displacement: int = 0,
    best: bool = True,
) -> EvalReport:
    """Mean query accuracy with a 95% interval and balancing summaries.

    ``predictor(episode) -> probs`` replaces the model's predictive when given.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    config = checkpoint.config
    dist = dist or config.dist
    variant = config.variant
    params, psi = checkpoint.model(best=best)
    accs, per_class, omega_pairs, class_acc_pairs, sizes, gammas, disp = [], [], [], [], [], [], []
    skipped = 0
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, 505, i])
        ep = sample_episode(dist, pool, rng, regime=regime, shots=shots)
        try:
            if predictor is not None:
                probs = predictor(ep)
                post = None
            else:
                post = _detached_posterior(ep, params, psi, variant) if variant.method == "taml" else None
                probs = predict(ep, params, psi, variant, mode, S, rng, posterior=post)
        except DivergenceError as exc:
            skipped += 1
            log.warning("eval episode %d skipped: %s", i, exc)
            continue
        hit = np.argmax(probs, axis=1) == ep.query_y
        accs.append(float(hit.mean()))
        pc = [float(hit[ep.query_y == c].mean()) for c in range(ep.n_classes)]
        per_class.append(pc)
        counts = ep.counts
        class_acc_pairs += [(int(n), a) for n, a in zip(counts, pc)]
        sizes.append(int(ep.n_support))
        if post is not None:
            e = expected_balancing(post, variant, np.random.default_rng([seed, 606, i]))
            omega_pairs += [(i, int(n), float(w)) for n, w in zip(counts, e["omega"])]
            gammas.append(e["gamma"].tolist())
            if i < n_displacement and variant.use_z:
                disp.append(
                    displacement_diagnostic(ep, params, psi, variant, max(S, 2), variant.inner_steps_test, rng)
                )
    if not accs:
        raise TrainingAborted("every evaluation episode diverged")
    return EvalReport(
        accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        ci95=ci95(accs),
        per_class_accuracy=np.mean(per_class, axis=0).tolist(),
        gamma_mean=np.mean(gammas, axis=0).tolist() if gammas else [],
        omega_vs_count=omega_pairs,
        class_acc_vs_count=class_acc_pairs,
        task_sizes=sizes,
        task_gamma=gammas,
        displacement=disp,
        n_requested=n_episodes,
        n_skipped=skipped,
        mode=mode,
        samples=S,
    )


def gamma_size_trend(checkpoint: Checkpoint, pool, sizes=(5, 25, 50, 200), n_per_size: int = 50, seed: int = 0):
    """Spearman correlation between task size and the mean of E[gamma] over layers.

    Each task size is split evenly over the episode's classes (shared shots).
    Returns ``(rho, [(size, mean E[gamma])...])``.
    """
    config = checkpoint.config
    C = config.dist.n_classes
    lo = min(config.dist.shot_range[0], min(sizes) // C)
    hi = max(config.dist.shot_range[1], max(sizes) // C)
    dist = EpisodeDistribution(C, (max(lo, 1), hi), 0.0, config.dist.queries_per_class, config.dist.source)
    params, psi = checkpoint.model()
    rows = []
    for size in sizes:
        shots = max(size // C, 1)
        vals = []
        for i in range(n_per_size):
            rng = np.random.default_rng([seed, 707, size, i])
            ep = sample_episode(dist, pool, rng, regime=TASK_IMBALANCE, shots=shots)
            post = _detached_posterior(ep, params, psi, config.variant)
            vals.append(float(np.mean(expected_balancing(post, config.variant, rng)["gamma"])))
        rows.append((size, float(np.mean(vals))))
    rho = stats.spearmanr([r[0] for r in rows], [r[1] for r in rows]).statistic
    return float(rho), rows


# ---------------------------------------------------------------------------
# sweeps

VARIANT_PRESETS = {
    "full": {"method": "taml", "use_omega": True, "use_gamma": True, "use_z": True},
    "omega": {"method": "taml", "use_omega": True, "use_gamma": False, "use_z": False},
    "gamma": {"method": "taml", "use_omega": False, "use_gamma": True, "use_z": False},
    "z": {"method": "taml", "use_omega": False, "use_gamma": False, "use_z": True},
    "maml": {"method": "maml"},
    "metasgd": {"method": "metasgd"},
    "metasgd_inv_n": {"method": "metasgd_inv_n"},
}
TRAIN_AXES = ("variant", "deterministic")
EVAL_AXES = ("mc_test", "task_size", "mode")
SWEEP_AXES = TRAIN_AXES + EVAL_AXES


def parse_axes(spec: str) -> dict[str, list]:
    """``"variant=full|z;mc_test=1|10"`` -> ``{"variant": ["full", "z"], "mc_test": [1, 10]}``."""
    axes: dict[str, list] = {}
    if not spec or not spec.strip():
        return axes
    for part in spec.split(";"):
        if not part.strip():
            continue
        name, _, vals = part.partition("=")
        name = name.strip()
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
        items = [v.strip() for v in vals.split("|") if v.strip()]
        if not items:
            raise ConfigError(f"axis {name!r} has no values")
        if name == "deterministic":
            items = [v.lower() in ("1", "true", "yes") for v in items]
        elif name in ("mc_test", "task_size"):
            items = [int(v) for v in items]
        elif name == "variant":
            for v in items:
                if v not in VARIANT_PRESETS:
                    raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANT_PRESETS)}")
        axes[name] = items
    return axes


def _cell_name(cell: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in cell.items()) or "baseline"


class MetricsWriter:
    """Append-only long-format CSV with the fixed metrics header."""

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        new = not self.path.exists()
        self.fh = open(self.path, "a", newline="", encoding="utf-8")
        self.w = csv.writer(self.fh)
        if new:
            self.w.writerow(METRICS_HEADER)

    def write(self, seed, cell, iteration, split, metric, value) -> None:
        self.w.writerow([self.run_id, seed, cell, iteration, split, metric, repr(float(value))])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def ablation_sweep(
    config: TrainConfig,
    axes: dict[str, list],
    out_dir,
    seeds=None,
    eval_episodes: int = 100,
    run_id: str = "sweep",
) -> list[dict]:
    """Train once per training cell and evaluate every evaluation cell.

    Writes ``metrics.csv`` (long format, fixed header) and ``sweep.csv`` (one
    row per cell and seed). A failing cell is recorded and the sweep goes on.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [config.seed] if seeds is None else list(seeds)
    names = list(axes)
    writer = MetricsWriter(out / "metrics.csv", run_id)
    rows = []
    trained: dict = {}
    try:
        for seed in seeds:
            for combo in itertools.product(*(axes[n] for n in names)):
                cell = dict(zip(names, combo))
                cname = _cell_name(cell)
                row = {"run_id": run_id, "seed": seed, "cell": cname, "status": "ok"}
                try:
                    train_key = (seed,) + tuple((k, cell[k]) for k in names if k in TRAIN_AXES)
                    if train_key not in trained:
                        cfg = _cell_config(config, cell, seed)
                        trained[train_key] = meta_train(cfg).best
                    ck = trained[train_key]
                    row.update(_evaluate_cell(ck, cell, eval_episodes, seed))
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    log.error("cell %s seed %s failed: %s", cname, seed, exc)
                    row["status"] = f"error: {exc}"
                for k, v in row.items():
                    if isinstance(v, float):
                        writer.write(seed, cname, "", "test" if not k.startswith("ood_") else "ood", k, v)
                rows.append(row)
    finally:
        writer.close()
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return rows


def _cell_config(config: TrainConfig, cell: dict, seed: int) -> TrainConfig:
    variant = dict(config.variant.__dict__)
    if "variant" in cell:
        variant.update(VARIANT_PRESETS[cell["variant"]])
    if "deterministic" in cell:
        variant["deterministic"] = cell["deterministic"]
    d = config.to_dict()
    d["variant"] = variant
    d["seed"] = seed
    return TrainConfig.from_dict(d)


def _evaluate_cell(ck: Checkpoint, cell: dict, n: int, seed: int) -> dict:
    pools = build_pools(ck.config)
    S = cell.get("mc_test", ck.config.variant.mc_test)
    mode = cell.get("mode", "mc")
    shots = None
    if "task_size" in cell:
        shots = max(cell["task_size"] // ck.config.dist.n_classes, 1)
        dist = EpisodeDistribution(
            ck.config.dist.n_classes, (1, max(shots, ck.config.dist.shot_range[1])), 0.0,
            ck.config.dist.queries_per_class, ck.config.dist.source,
        )
    else:
        dist = ck.config.dist
    out = {}
    rep = evaluate(ck, pools["test"], n, mode, S, seed, dist=dist, shots=shots)
    out.update(rep.scalars())
    ood = evaluate(ck, pools["ood"], n, mode, S, seed, dist=dist, shots=shots, n_displacement=min(n, 10))
    out.update({f"ood_{k}": v for k, v in ood.scalars().items()})
    out["best_val_acc"] = ck.best_val_acc
    out["iterations"] = float(ck.iteration)
    return out


def resolve_pool(config: TrainConfig, pool: str, labels_path=None):
    """A pool id (train/val/test/ood) or a csv/idx file path."""
    if pool in ("train", "val", "test", "ood"):
        return build_pools(config)[pool]
    p = Path(pool)
    if p.suffix.lower() == ".csv":
        return load_pool(p, "csv_labeled")
    return load_pool(p, "idx_images", labels_path=labels_path)
