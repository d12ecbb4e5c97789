"""Top-K ranking metrics and convergence-step detection.

Scores are indexed by item id; index 0 is the reserved padding id and is
never a candidate. Ranking is fully deterministic: ties are broken in
favor of the smaller item id. NDCG uses the single-relevant-item form
1/log2(rank + 1).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import NonFiniteError

EVAL_KS = (1, 3, 5, 10)
TARGET_METRIC = "ndcg@10"


@dataclass
class EvalResult:
    recall: dict
    ndcg: dict
    num_users_evaluated: int


@dataclass(frozen=True)
class ConvergenceSpec:
    """Early-stopping policy: evaluate every `eval_every` steps and stop
    after `patience` consecutive evaluations without strict improvement."""

    eval_every: int = 10
    patience: int = 5
    target_metric: str = TARGET_METRIC

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.target_metric != TARGET_METRIC:
            raise ValueError(
                f"target_metric is fixed to {TARGET_METRIC!r}, "
                f"got {self.target_metric!r}"
            )


class Decision(Enum):
    CONTINUE = "continue"
    STOP = "stop"


def rank_of_target(scores, target: int, exclude=frozenset()) -> int:
    """1-based rank of `target` among non-excluded item ids >= 1.

    rank = 1 + (# candidates scoring strictly higher) + (# equal-scoring
    candidates with smaller id); item id 0 is never a candidate.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"scores must be 1D, got shape {s.shape}")
    if not 1 <= target < s.size:
        raise ValueError(f"target id {target} outside 1..{s.size - 1}")
    if target in exclude:
        raise ValueError(f"target id {target} is excluded")
    candidate = np.ones(s.size, dtype=bool)
    candidate[0] = False
    if exclude:
        excluded = np.fromiter(exclude, dtype=np.int64)
        if excluded.min() < 0 or excluded.max() >= s.size:
            raise ValueError("exclude holds ids outside the score array")
        candidate[excluded] = False
    if not np.isfinite(s[candidate]).all():
        raise NonFiniteError("candidate scores are non-finite")
    t = s[target]
    greater = int(np.count_nonzero(candidate & (s > t)))
    equal_smaller = int(
        np.count_nonzero(candidate[:target] & (s[:target] == t))
    )
    return 1 + greater + equal_smaller


def recall_ndcg(ranks, ks=EVAL_KS) -> EvalResult:
    """Mean Recall@K and NDCG@K over per-user 1-based ranks."""
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise ValueError("no ranks to aggregate")
    if r.min() < 1:
        raise ValueError("ranks must be >= 1")
    recall, ndcg = {}, {}
    gains = 1.0 / np.log2(r + 1.0)
    for k in ks:
        hit = r <= k
        recall[k] = float(hit.mean())
        ndcg[k] = float(np.where(hit, gains, 0.0).mean())
    return EvalResult(recall=recall, ndcg=ndcg, num_users_evaluated=int(r.size))


class ConvergenceTracker:
    """Tracks the running max of the target metric over evaluations.

    best_step() is the step of the best observation and is reported as the
    converged training step.
    """

    def __init__(self, spec: ConvergenceSpec):
        self.spec = spec
        self._best = None
        self._best_step = None
        self._stale = 0
        self._last_step = None

    def observe(self, step: int, metric: float) -> Decision:
        if self._last_step is not None and step <= self._last_step:
            raise ValueError(
                f"steps must be observed in increasing order: got {step} "
                f"after {self._last_step}"
            )
        self._last_step = step
        if self._best is None or metric > self._best:
            self._best = metric
            self._best_step = step
            self._stale = 0
            return Decision.CONTINUE
        self._stale += 1
        if self._stale >= self.spec.patience:
            return Decision.STOP
        return Decision.CONTINUE

    def best_step(self) -> int:
        if self._best_step is None:
            raise ValueError("no observations yet")
        return self._best_step

    def best_metric(self) -> float:
        if self._best is None:
            raise ValueError("no observations yet")
        return self._best
