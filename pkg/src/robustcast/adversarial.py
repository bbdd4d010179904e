"""Greedy worst-case missing-pattern search and adversarial training.

The search starts from a subset's base pattern, repeatedly marks the free
feature whose removal raises the data-set loss the most, and accepts it only
while the loss does not decrease; the trainer alternates such searches with
one epoch of gradient updates, warm-started from the optimistic fit. A
uniform-sampling variant replaces the search for equality-budget subsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import rng_for
from .dataio import Dataset
from .exceptions import DomainError, SizeError
from .missingness import MissingPattern
from .models import Architecture, ModelParams, mse_loss
from .training import TrainConfig, TrainResult, run_training_loop, train_nominal


@dataclass(frozen=True)
class AdvSearchScope:
    """Where the adversary may act: the free features, the global budget on
    simultaneously missing features, and the base pattern holding coordinates
    already fixed as missing."""

    free: tuple[int, ...]
    budget: int
    base: MissingPattern

    def __post_init__(self):
        object.__setattr__(self, "free", tuple(sorted(int(j) for j in self.free)))
        if self.budget < 0:
            raise DomainError("budget must be >= 0")
        if self.base.popcount() > self.budget:
            raise DomainError("base pattern already exceeds the budget")
        if any(self.base.bits[j] for j in self.free):
            raise DomainError("free features must not be fixed in the base pattern")


@dataclass
class AdversarialPattern:
    pattern: MissingPattern
    loss: float
    steps: list[tuple[int, float]] = field(default_factory=list)


def _candidate_losses(
    X: np.ndarray,
    y: np.ndarray,
    params: ModelParams,
    current: MissingPattern,
    candidates: list[int],
) -> np.ndarray:
    losses = np.empty(len(candidates))
    for i, j in enumerate(candidates):
        losses[i] = mse_loss(params, X, y, current.with_missing(j))
    return losses


def find_adversarial(
    X: np.ndarray,
    y: np.ndarray,
    scope: AdvSearchScope,
    params: ModelParams,
) -> AdversarialPattern:
    """Greedy search for a worst-case pattern within the scope.

    Each round evaluates the full-data loss with one more candidate feature
    missing, fixes the argmax (ties break to the lowest feature index), and
    stops at the budget or as soon as the best candidate strictly decreases
    the incumbent loss. The accepted-loss sequence is non-decreasing.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise SizeError("adversarial search needs a non-empty data set")
    current = MissingPattern(bits=scope.base.bits.copy())
    best_loss = mse_loss(params, X, y, current)
    candidates = list(scope.free)
    steps: list[tuple[int, float]] = []
    while current.popcount() < scope.budget and candidates:
        losses = _candidate_losses(X, y, params, current, candidates)
        pick = int(np.argmax(losses))
        if losses[pick] >= best_loss:
            j_star = candidates.pop(pick)
            current = current.with_missing(j_star)
            best_loss = float(losses[pick])
            steps.append((j_star, best_loss))
        else:
            break
    return AdversarialPattern(pattern=current, loss=float(best_loss), steps=steps)


def greedy_split_feature(
    X: np.ndarray,
    y: np.ndarray,
    scope: AdvSearchScope,
    params: ModelParams,
) -> int | None:
    """First round of the greedy search only: the single free feature whose
    loss is largest (no acceptance test). None when there is nothing to pick."""
    candidates = list(scope.free)
    if not candidates:
        return None
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise SizeError("split-feature search needs a non-empty data set")
    losses = _candidate_losses(X, y, params, scope.base, candidates)
    return candidates[int(np.argmax(losses))]


def train_adversarial(
    train: Dataset,
    val: Dataset,
    scope: AdvSearchScope,
    cfg: TrainConfig,
    arch: Architecture,
    family: str,
    adaptive: bool,
    warm_start: ModelParams | None = None,
) -> TrainResult:
    """Adversarial training over the scope.

    Starts from the optimistic parameters (trained at the base pattern unless
    warm_start supplies them), then per iteration: search a worst-case
    pattern on the training split, run one epoch of updates against it, and
    score validation at a freshly searched validation-split pattern.
    Optimizer moments start fresh; the warm start carries parameters only.
    """
    if warm_start is None:
        warm_start = train_nominal(
            train, val, scope.base, cfg, arch, family, adaptive
        ).params
    pick_train = lambda k, params: find_adversarial(train.X, train.y, scope, params).pattern
    pick_val = lambda k, params: find_adversarial(val.X, val.y, scope, params).pattern
    return run_training_loop(train, val, warm_start, cfg, pick_train, pick_val)


def steps_to_csv(result: AdversarialPattern, path) -> None:
    """Dump the accepted greedy steps (step, chosen feature, loss) for
    interpretability reports."""
    lines = ["step,feature,loss"]
    for i, (feature, loss) in enumerate(result.steps):
        lines.append(f"{i},{feature},{loss!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def sample_fixed_adversarial(
    count: int,
    maskable: tuple[int, ...],
    n_features: int,
    rng: np.random.Generator,
) -> MissingPattern:
    """Uniformly random pattern with exactly `count` maskable features missing."""
    if count < 0 or count > len(maskable):
        raise DomainError(f"missing count {count} out of range [0, {len(maskable)}]")
    chosen = rng.choice(len(maskable), size=count, replace=False)
    missing = [maskable[int(i)] for i in chosen]
    return MissingPattern.from_missing(n_features, missing)


def train_sampled_adversarial(
    train: Dataset,
    val: Dataset,
    count: int,
    cfg: TrainConfig,
    arch: Architecture,
    family: str,
    adaptive: bool,
    warm_start: ModelParams | None = None,
) -> TrainResult:
    """Sampling variant for equality-budget subsets: each iteration draws one
    fresh uniform pattern with exactly `count` features missing for the
    training epoch and another for the validation score."""
    if warm_start is None:
        warm_start = train_nominal(
            train, val, MissingPattern.zeros(train.p), cfg, arch, family, adaptive
        ).params
    rng_train = rng_for(cfg.seed, "sample-train", count)
    rng_val = rng_for(cfg.seed, "sample-val", count)
    pick_train = lambda k, params: sample_fixed_adversarial(
        count, train.maskable, train.p, rng_train
    )
    pick_val = lambda k, params: sample_fixed_adversarial(count, train.maskable, train.p, rng_val)
    return run_training_loop(train, val, warm_start, cfg, pick_train, pick_val)
