"""Sequential estimation of a Bernoulli probability with (theta, gamma) guarantees.

Each trial samples one network from the posterior (plus, for the
classification property, one class at the test point), verifies it, and
contributes one Bernoulli outcome.  After every trial a Clopper-Pearson
interval is recomputed and turned into a Massart sample-size bound; sampling
stops as soon as the number of trials reaches the smaller of the Massart and
Chernoff requirements.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import betainc

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EstimationConfig:
    theta: float = 0.075
    gamma: float = 0.075
    alpha: float = 0.05
    eta: Optional[float] = None
    max_samples: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.alpha < self.gamma:
            raise ValueError(f"alpha must lie in (0, gamma), got {self.alpha}")
        if self.eta is not None and not 0 <= self.eta <= 1:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.max_samples is not None and self.max_samples < 1:
            raise ValueError("max_samples must be positive")


@dataclass(frozen=True)
class ConfidenceInterval:
    a: float
    b: float
    level: float

    def __post_init__(self):
        if not 0.0 <= self.a <= self.b <= 1.0:
            raise ValueError(f"invalid interval [{self.a}, {self.b}]")


# --- sample-size bounds -----------------------------------------------------

def _check_theta_gamma(theta, gamma):
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")


def chernoff_bound(theta: float, gamma: float) -> float:
    """Real-valued Chernoff requirement ``log(2/gamma) / (2 theta^2)``."""
    _check_theta_gamma(theta, gamma)
    return math.log(2.0 / gamma) / (2.0 * theta * theta)


def chernoff_n(theta: float, gamma: float) -> int:
    """Smallest integer ``n`` with ``n > log(2/gamma) / (2 theta^2)``."""
    return math.floor(chernoff_bound(theta, gamma)) + 1


def massart_n(theta: float, gamma: float, alpha: float, ci: ConfidenceInterval) -> float:
    """Real-valued Massart requirement evaluated on a confidence interval ``[a, b]``.

    The case term uses ``b`` when the interval lies below 1/2, ``a`` when it
    lies above, and the worst case ``(3/2 + theta)^2`` otherwise.
    """
    _check_theta_gamma(theta, gamma)
    if not 0 < alpha < gamma:
        raise ValueError(f"alpha must lie in (0, gamma), got {alpha}")
    factor = 2.0 / (9.0 * theta * theta) * math.log(2.0 / (gamma - alpha))
    a, b = ci.a, ci.b
    if b < 0.5:
        term = (3 * b + theta) * (3 * (1 - b) - theta)
    elif a > 0.5:
        term = (3 * (1 - a) + theta) * (3 * a + theta)
    else:
        term = (1.5 + theta) ** 2
    return factor * term


def massart_curve(theta: float, gamma: float, alpha: float, endpoint: float) -> float:
    """Massart requirement as a function of the governing interval endpoint.

    An endpoint below 1/2 is read as the upper end ``b``, above 1/2 as the
    lower end ``a``; exactly 1/2 falls in the straddling case.
    """
    if endpoint < 0.5:
        ci = ConfidenceInterval(0.0, endpoint, 1 - alpha)
    elif endpoint > 0.5:
        ci = ConfidenceInterval(endpoint, 1.0, 1 - alpha)
    else:
        ci = ConfidenceInterval(0.5, 0.5, 1 - alpha)
    return massart_n(theta, gamma, alpha, ci)


# --- Clopper-Pearson --------------------------------------------------------

def _beta_quantile(q: float, a: float, b: float, tol: float = 1e-10) -> float:
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(a, b, mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@lru_cache(maxsize=None)
def _cp_bounds(k: int, n: int, alpha: float) -> tuple:
    a = 0.0 if k == 0 else _beta_quantile(alpha / 2, k, n - k + 1)
    b = 1.0 if k == n else _beta_quantile(1 - alpha / 2, k + 1, n - k)
    return a, b


def clopper_pearson(k: int, n: int, alpha: float) -> ConfidenceInterval:
    """Exact two-sided ``1 - alpha`` binomial interval for ``k`` successes in ``n`` trials."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"invalid counts k={k}, n={n}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    a, b = _cp_bounds(int(k), int(n), float(alpha))
    return ConfidenceInterval(a, b, 1 - alpha)


# --- class sampling -----------------------------------------------------------

def sample_class(likelihoods, rng: np.random.Generator) -> int:
    """Draw a class index from a categorical distribution by inverse CDF."""
    p = np.asarray(likelihoods, dtype=np.float64)
    if (p < 0).any():
        raise ValueError("negative likelihood")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"likelihoods sum to {p.sum()}, not 1")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    if idx >= len(p):
        idx = int(np.flatnonzero(p > 0)[-1])
    return idx


# --- sequential loop ----------------------------------------------------------

@dataclass
class EstimationResult:
    p_hat: float
    n: int
    k: int
    ci: ConfidenceInterval
    n_chernoff: int
    final_n_max: int
    terminating_bound: str
    robust_verdict: Optional[bool] = None
    witnesses: list = field(default_factory=list)
    log: Optional[list] = None
    config: Optional[EstimationConfig] = None

    def to_dict(self, include_witnesses: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "p_hat": self.p_hat,
            "n": self.n,
            "k": self.k,
            "ci": {"a": self.ci.a, "b": self.ci.b, "level": self.ci.level},
            "n_chernoff": self.n_chernoff,
            "final_n_max": self.final_n_max,
            "terminating_bound": self.terminating_bound,
            "robust_verdict": self.robust_verdict,
            "config": asdict(self.config) if self.config is not None else None,
        }
        if include_witnesses:
            d["witnesses"] = [{"index": i, "x": np.asarray(x).ravel().tolist()} for i, x in self.witnesses]
        if self.log is not None:
            d["log"] = self.log
        return d


class EstimationError(RuntimeError):
    """Raised when estimation cannot finish; ``partial`` holds the state reached."""

    def __init__(self, message, partial: Optional[EstimationResult] = None):
        super().__init__(message)
        self.partial = partial


def _as_verdict(outcome):
    # trials may return a bare bool (stubs) or a VerdictSample-like object
    if isinstance(outcome, (bool, np.bool_)):
        return bool(outcome), None, False, None
    return (bool(outcome.sat), outcome.witness, bool(getattr(outcome, "inconclusive", False)),
            getattr(outcome, "sampled_class", None))


def _run_trials(trial, start, count, pool):
    if pool is None:
        return [trial(i) for i in range(start, start + count)]
    return list(pool.map(trial, range(start, start + count)))


def sequential_estimate(trial: Callable[[int], object], cfg: EstimationConfig,
                        keep_log: bool = False, workers: int = 1) -> EstimationResult:
    """Run the sequential Chernoff/Massart loop over ``trial(0), trial(1), ...``.

    ``trial(i)`` must be a deterministic function of ``i`` (each trial seeds
    its own generator from the index), returning a bool or a verdict with
    ``sat``/``witness`` attributes.  With ``workers > 1`` trials are computed
    speculatively in parallel but committed strictly in index order, so the
    stopping point is identical to the sequential run.
    """
    n_c_real = chernoff_bound(cfg.theta, cfg.gamma)
    n_chernoff = chernoff_n(cfg.theta, cfg.gamma)
    n_max = math.ceil(n_c_real)
    n = k = 0
    ci = ConfidenceInterval(0.0, 1.0, 1 - cfg.alpha)
    bound = "Chernoff"
    witnesses = []
    log = [] if keep_log else None
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    pending = []
    try:
        while n < n_max:
            if cfg.max_samples is not None and n >= cfg.max_samples:
                partial = EstimationResult(k / n, n, k, ci, n_chernoff, n_max, bound, None,
                                           witnesses, log, cfg)
                raise EstimationError(f"max_samples={cfg.max_samples} reached before n_max={n_max}", partial)
            if not pending:
                pending = _run_trials(trial, n, max(1, workers), pool)
            sat, witness, inconclusive, cls = _as_verdict(pending.pop(0))
            if inconclusive:
                partial = EstimationResult(k / n if n else 0.0, n, k, ci, n_chernoff, n_max, bound,
                                           None, witnesses, log, cfg)
                raise EstimationError(f"trial {n} inconclusive after retry", partial)
            if sat:
                k += 1
                if witness is not None:
                    witnesses.append((n, witness))
            n += 1
            ci = clopper_pearson(k, n, cfg.alpha)
            n_m = massart_n(cfg.theta, cfg.gamma, cfg.alpha, ci)
            bound = "Massart" if n_m < n_c_real else "Chernoff"
            n_max = math.ceil(min(n_m, n_c_real))
            if log is not None:
                log.append({"index": n - 1, "sat": sat, "sampled_class": cls, "k": k,
                            "ci_a": ci.a, "ci_b": ci.b, "n_max": n_max})
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    assert n_max <= n_chernoff
    p_hat = k / n
    verdict = None if cfg.eta is None else p_hat <= cfg.eta
    return EstimationResult(p_hat, n, k, ci, n_chernoff, n_max, bound, verdict, witnesses, log, cfg)


def default_workers() -> int:
    """Worker count from ``BNNROBUST_WORKERS`` (default 1)."""
    return max(1, int(os.environ.get("BNNROBUST_WORKERS", "1")))


class PosteriorTrial:
    """One Bernoulli trial: sample weights (and class), then verify.

    Picklable so it can be shipped to worker processes.
    """

    def __init__(self, query, posterior, seed: int):
        self.query = query
        self.posterior = posterior
        self.seed = seed

    def __call__(self, index: int):
        from .bayes import sample_weights
        from .nn import Network, forward, softmax
        from .verify import Phi2, verify

        def attempt(split_scale):
            rng = np.random.default_rng([self.seed, index])
            net = Network(self.posterior.arch, sample_weights(self.posterior, rng))
            cls = None
            if isinstance(self.query.prop, Phi2):
                cls = sample_class(softmax(forward(net, self.query.x_star)), rng)
            return verify(net, self.query, rng, sampled_class=cls, split_scale=split_scale)

        verdict = attempt(1)
        if verdict.inconclusive:
            verdict = attempt(2)
        return verdict


def estimate_robustness(query, posterior, cfg: EstimationConfig, keep_log: bool = False,
                        workers: int = 1) -> EstimationResult:
    """Estimate the probability that ``query``'s property holds under ``posterior``."""
    return sequential_estimate(PosteriorTrial(query, posterior, cfg.seed), cfg,
                               keep_log=keep_log, workers=workers)
