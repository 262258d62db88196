"""Bilevel training: MAML / ANIL / BOIL inner loops, pseudo-label re-training, outer updates."""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from . import labelprop as lp
from . import models
from .diffcore import ParamSet
from .episodes import DataSource, Episode, Task, sample_episode

logger = logging.getLogger(__name__)

INNER_GROUPS = {"maml": ("body", "head"), "anil": ("head",), "boil": ("body",)}
RETRAIN_GROUPS = ("body", "head")


class AdaptationError(FloatingPointError):
    pass


class DegenerateSampleWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MetaConfig:
    algorithm: str = "maml"
    gp_enabled: bool = True
    alpha: float = 0.5              # inner step size
    beta: float = 1e-3              # outer step size
    gamma: float = 1e-3             # graph-module step size
    inner_steps: int = 1
    retrain_steps: int = 1
    retrain_lr: float | None = None  # None -> alpha
    retrain_from_adapted: bool = False
    retrain_groups: str = "algorithm"  # or "both"
    meta_batch: int = 4
    alpha_prop: float = 0.99
    k_nn: int = 20
    squared_distance: bool = True
    total_episodes: int = 30000
    decay_fractions: tuple[float, ...] = (1 / 3, 2 / 3)
    decay_factor: float = 0.1
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    pick_cap: int | None = None
    pseudo_source: str = "propagation"  # or "classifier"
    picking: str = "adaptive"           # or "all"
    val_every: int = 500
    val_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in INNER_GROUPS:
            raise ValueError(f"algorithm must be one of {sorted(INNER_GROUPS)}")
        if min(self.alpha, self.beta, self.gamma) < 0 or (
                self.retrain_lr is not None and self.retrain_lr < 0):
            raise ValueError("step sizes must be non-negative")
        if not 0.0 < self.alpha_prop < 1.0:
            raise ValueError("alpha_prop must lie in (0, 1)")
        if self.inner_steps < 1 or self.retrain_steps < 1 or self.meta_batch < 1:
            raise ValueError("inner_steps, retrain_steps and meta_batch must be >= 1")
        if self.pseudo_source not in ("propagation", "classifier"):
            raise ValueError("pseudo_source must be 'propagation' or 'classifier'")
        if self.picking not in ("adaptive", "all"):
            raise ValueError("picking must be 'adaptive' or 'all'")
        if self.retrain_groups not in ("algorithm", "both"):
            raise ValueError("retrain_groups must be 'algorithm' or 'both'")

    @property
    def retrain_step_size(self) -> float:
        return self.alpha if self.retrain_lr is None else self.retrain_lr

    @property
    def phase3_groups(self) -> tuple[str, ...]:
        return INNER_GROUPS[self.algorithm] if self.retrain_groups == "algorithm" else RETRAIN_GROUPS

    def lr_factor(self, episode: int) -> float:
        """Step-decay multiplier in effect once ``episode`` episodes have been consumed."""
        passed = sum(episode >= round(f * self.total_episodes) for f in self.decay_fractions)
        return self.decay_factor ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_fractions"] = list(self.decay_fractions)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class AdaptReport:
    params: ParamSet
    phase1_params: ParamSet
    support_losses: list[float]
    retrain_losses: list[float] = field(default_factory=list)
    features: np.ndarray | None = None  # phase-2 embedding of support + query
    propagation: lp.PropagationResult | None = None
    picked: lp.PickedSet | None = None
    support_size: int = 0
    query_loss: float | None = None

    @property
    def picked_k(self) -> int:
        return self.picked.k if self.picked is not None else 0


def support_loss(params, x: np.ndarray, y: np.ndarray) -> dc.Tensor:
    return dc.cross_entropy(models.forward(params, x), y)


def sgd_steps(params: ParamSet, x: np.ndarray, y: np.ndarray, lr: float, steps: int,
              groups) -> tuple[ParamSet, list[float]]:
    losses = []
    for step in range(steps):
        tracked = params.track(groups)
        try:
            loss = support_loss(tracked, x, y)
        except FloatingPointError as exc:
            raise AdaptationError(f"non-finite value at step {step}: {exc}") from exc
        value = float(loss.value)
        if not math.isfinite(value):
            raise AdaptationError(f"non-finite support loss at step {step}")
        losses.append(value)
        if lr == 0:
            continue
        grads = dc.backward_grad(loss, {n: tracked[n] for n in params.names(groups)})
        params = dc.apply_sgd(params, grads, lr, groups)
    return params, losses


def inner_adapt(algorithm: str, params: ParamSet, support_x: np.ndarray, support_y: np.ndarray,
                alpha: float, steps: int = 1) -> ParamSet:
    """Task adaptation on the support set.

    maml updates body and head, anil only the head, boil only the body.
    """
    if len(support_y) == 0:
        raise ValueError("empty support set")
    adapted, _ = sgd_steps(params, support_x, support_y, alpha, steps, INNER_GROUPS[algorithm])
    return adapted


def _classifier_pseudo_labels(params: ParamSet, query_x: np.ndarray) -> lp.PropagationResult:
    probs = dc.softmax(models.forward(params, query_x)).value
    return lp.PropagationResult(scores=probs, confidence=probs.max(axis=1),
                                pseudo_label=probs.argmax(axis=1))


def gp_adapt(params: ParamSet, task: Task | Episode, config: MetaConfig) -> AdaptReport:
    """Three-phase adaptation: fast adaptation, pseudo-labeling + picking, re-training.

    Only the support set and the unlabeled query inputs are read.
    """
    if isinstance(task, Episode):
        task = task.task()
    phase1, sup_losses = sgd_steps(params, task.support_x, task.support_y, config.alpha,
                                   config.inner_steps, INNER_GROUPS[config.algorithm])

    features = None
    if config.pseudo_source == "propagation":
        joint = np.concatenate([task.support_x, task.query_x])
        features = models.embed(phase1, joint).value
        sigmas = models.scale_lengths(phase1, features).value
        result = lp.pseudo_label_query(features, sigmas, task.support_y, task.n_way,
                                       k_nn=config.k_nn, alpha_prop=config.alpha_prop,
                                       squared=config.squared_distance)
    else:
        result = _classifier_pseudo_labels(phase1, task.query_x)

    if config.picking == "adaptive":
        picked = lp.adaptive_pick(result, task.n_way, cap=config.pick_cap)
    else:
        idx = np.arange(len(result.pseudo_label))
        counts = np.bincount(result.pseudo_label, minlength=task.n_way)
        picked = lp.PickedSet(indices=idx, labels=result.pseudo_label, per_class=counts)

    x2 = np.concatenate([task.support_x, task.query_x[picked.indices]])
    y2 = np.concatenate([task.support_y, picked.labels]).astype(np.int64)
    start = phase1 if config.retrain_from_adapted else params
    adapted, re_losses = sgd_steps(start, x2, y2, config.retrain_step_size,
                                   config.retrain_steps, config.phase3_groups)
    return AdaptReport(params=adapted, phase1_params=phase1, support_losses=sup_losses,
                       retrain_losses=re_losses, features=features, propagation=result,
                       picked=picked, support_size=len(y2))


def adapt(params: ParamSet, task: Task | Episode, config: MetaConfig) -> AdaptReport:
    """gp_adapt when pseudo-labeling is enabled, plain inner adaptation otherwise."""
    if config.gp_enabled:
        return gp_adapt(params, task, config)
    if isinstance(task, Episode):
        task = task.task()
    adapted, losses = sgd_steps(params, task.support_x, task.support_y, config.alpha,
                                config.inner_steps, INNER_GROUPS[config.algorithm])
    return AdaptReport(params=adapted, phase1_params=adapted, support_losses=losses,
                       support_size=len(task.support_y))


def graph_surrogate_loss(graph_params, features: np.ndarray, support_y: np.ndarray,
                         query_y: np.ndarray, n_way: int, config: MetaConfig) -> dc.Tensor:
    """Cross-entropy of one unrolled propagation step against the query labels.

    Gradients reach the length-scale network through the similarity graph.
    """
    sigmas = models.scale_lengths(graph_params, features)
    graph = lp.build_similarity(features, sigmas, config.k_nn, squared=config.squared_distance)
    S = lp.normalize_laplacian(graph)
    Y = lp.label_matrix(support_y, len(query_y), n_way)
    F1 = lp.propagate_step(S, Y, config.alpha_prop)
    n_sup = len(support_y)
    query_rows = dc.matmul(np.eye(len(Y))[n_sup:], F1)
    return dc.cross_entropy(query_rows, query_y)


def outer_step(params: ParamSet, episodes: list[Episode], config: MetaConfig,
               lr_factor: float = 1.0) -> tuple[ParamSet, float, list[AdaptReport]]:
    """First-order meta update over a batch of episodes.

    Body and head move along the summed query-loss gradient taken at each
    episode's adapted parameters; the graph module follows the surrogate loss.
    """
    if not episodes:
        raise ValueError("empty meta-batch")
    model_names = params.names(RETRAIN_GROUPS)
    graph_names = params.names(("graph",))
    grad_model = {n: np.zeros_like(params[n]) for n in model_names}
    grad_graph = {n: np.zeros_like(params[n]) for n in graph_names}
    meta_loss = 0.0
    reports = []
    for ep in episodes:
        report = adapt(params, ep.task(), config)
        tracked = report.params.track(RETRAIN_GROUPS)
        loss = support_loss(tracked, ep.query_x, ep.query_y)
        report.query_loss = float(loss.value)
        meta_loss += report.query_loss
        g = dc.backward_grad(loss, {n: tracked[n] for n in model_names})
        for n in model_names:
            grad_model[n] += g[n]
        if config.gp_enabled and report.features is not None and config.gamma > 0:
            gtracked = params.track(("graph",))
            gl = graph_surrogate_loss(gtracked, report.features, ep.support_y, ep.query_y,
                                      ep.n_way, config)
            gg = dc.backward_grad(gl, {n: gtracked[n] for n in graph_names})
            for n in graph_names:
                grad_graph[n] += gg[n]
        reports.append(report)
    if not math.isfinite(meta_loss):
        raise AdaptationError("non-finite meta-loss")
    new = dc.apply_sgd(params, grad_model, config.beta * lr_factor, RETRAIN_GROUPS)
    if config.gp_enabled:
        new = dc.apply_sgd(new, grad_graph, config.gamma * lr_factor, ("graph",))
    return new, meta_loss, reports


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


@dataclass
class TrainResult:
    params: ParamSet
    log: list[dict]
    aborted: bool = False
    message: str = ""


def meta_train(params: ParamSet, config: MetaConfig, train_source: DataSource,
               val_source: DataSource | None = None) -> TrainResult:
    """Run outer steps until ``config.total_episodes`` episodes are consumed.

    Log rows carry ``episode, meta_loss, val_acc, lr, picked_mean_k``; val_acc
    is None except every ``val_every`` episodes and at the end.
    """
    log: list[dict] = []
    done = 0
    next_val = config.val_every
    while done < config.total_episodes:
        batch = min(config.meta_batch, config.total_episodes - done)
        factor = config.lr_factor(done)
        eps = [sample_episode(train_source, config.n_way, config.k_shot, config.q_query,
                              episode_rng(config.seed, 0, done + i)) for i in range(batch)]
        try:
            params, meta_loss, reports = outer_step(params, eps, config, factor)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.error("training aborted after %d episodes: %s", done, exc)
            return TrainResult(params, log, aborted=True, message=str(exc))
        done += batch
        row = {"episode": done, "meta_loss": meta_loss / batch, "val_acc": None,
               "lr": config.beta * factor,
               "picked_mean_k": float(np.mean([r.picked_k for r in reports]))}
        if val_source is not None and config.val_episodes > 0 and (
                done >= next_val or done == config.total_episodes):
            row["val_acc"] = meta_test(params, config, val_source, config.val_episodes,
                                       stream=2).mean
            while next_val <= done:
                next_val += config.val_every
            logger.info("episode %d  meta_loss %.4f  val_acc %.4f", done, row["meta_loss"],
                        row["val_acc"])
        log.append(row)
    return TrainResult(params, log)


@dataclass
class EvalResult:
    mean: float
    ci95: float
    episodes: int
    accuracies: np.ndarray
    warnings: list[str] = field(default_factory=list)


def episode_accuracy(params: ParamSet, episode: Episode, config: MetaConfig) -> float:
    report = adapt(params, episode.task(), config)
    pred = models.predict(report.params, episode.query_x)
    return float(np.mean(pred == episode.query_y))


def summarize(accs: np.ndarray) -> EvalResult:
    n = len(accs)
    notes = []
    if n == 1:
        ci = 0.0
        msg = "single evaluation episode: confidence interval set to 0"
        warnings.warn(msg, DegenerateSampleWarning, stacklevel=3)
        notes.append(msg)
    else:
        ci = float(1.96 * accs.std(ddof=1) / math.sqrt(n))
    return EvalResult(mean=float(accs.mean()), ci95=ci, episodes=n, accuracies=accs,
                      warnings=notes)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GPML_THREADS", "1")))
    except ValueError:
        return 1


def meta_test(params: ParamSet, config: MetaConfig, test_source: DataSource,
              episode_count: int = 600, stream: int = 1, query_counts=None) -> EvalResult:
    """Mean query accuracy over fresh test episodes, with a 95% interval (1.96 stderr).

    ``query_counts`` overrides the per-class query sizes (imbalanced query sets).
    """
    if episode_count < 1:
        raise ValueError("episode_count must be >= 1")
    q = config.q_query if query_counts is None else query_counts

    def one(i: int) -> float:
        ep = sample_episode(test_source, config.n_way, config.k_shot, q,
                            episode_rng(config.seed, stream, i))
        return episode_accuracy(params, ep, config)

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one, range(episode_count)))
    else:
        accs = [one(i) for i in range(episode_count)]
    return summarize(np.asarray(accs))


def with_overrides(config: MetaConfig, **changes) -> MetaConfig:
    return replace(config, **changes)
