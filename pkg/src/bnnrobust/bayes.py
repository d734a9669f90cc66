"""Posterior approximations over network weights.

Three inference routes produce a :class:`Posterior` that can be sampled one
weight vector at a time:

* HMC: leapfrog Hamiltonian Monte Carlo with a Metropolis correction; the
  posterior is the thinned chain after burn-in.
* VI: mean-field Gaussian fitted by maximising the ELBO with one
  reparameterised sample per step and Adam updates.
* MCD: point weights trained with dropout on hidden ReLU outputs; samples
  apply fresh Bernoulli masks.

The samplers work on any likelihood object exposing ``n_params``,
``n_data`` and ``log_lik_and_grad(w, idx=None, masks=None)``; the classifier
likelihood wraps a network and a dataset, the Gaussian-mean likelihood is a
one-parameter conjugate model with closed-form posterior.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import nn
from .nn import Architecture, Conv2D, Dense, Flatten, ReLU

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian prior, one ``(mean, variance)`` pair per parametric layer.

    ``layers`` may hold a single pair, which is then used for every layer.
    """

    layers: tuple = ((0.0, 1.0),)

    def __post_init__(self):
        for mean, var in self.layers:
            if not var > 0:
                raise ValueError(f"prior variance must be positive, got {var}")

    @classmethod
    def for_arch(cls, arch: Architecture) -> "PriorSpec":
        """Conv kernels N(1, 0.01), dense layers N(0, 1)."""
        pairs = []
        for layer in arch.layers:
            if isinstance(layer, Conv2D):
                pairs.append((1.0, 0.01))
            elif isinstance(layer, Dense):
                pairs.append((0.0, 1.0))
        return cls(tuple(pairs))

    def vectors(self, arch_or_n) -> tuple:
        """Per-parameter prior means and variances."""
        if isinstance(arch_or_n, int):
            mean, var = self.layers[0]
            return np.full(arch_or_n, float(mean)), np.full(arch_or_n, float(var))
        arch = arch_or_n
        spans = [s for layer, s in zip(arch.layers, arch.param_slices()) if s[1] > s[0]]
        pairs = self.layers if len(self.layers) == len(spans) else [self.layers[0]] * len(spans)
        if len(self.layers) not in (1, len(spans)):
            raise ValueError(f"prior has {len(self.layers)} entries for {len(spans)} parametric layers")
        mean = np.zeros(arch.n_params)
        var = np.ones(arch.n_params)
        for (lo, hi), (m, v) in zip(spans, pairs):
            mean[lo:hi] = m
            var[lo:hi] = v
        return mean, var

    def to_dict(self):
        return {"layers": [list(p) for p in self.layers]}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mcd"
    step_size: float = 0.01
    leapfrog_steps: int = 5
    iterations: int = 1000
    learning_rate: float = 0.01
    batch_size: int = 128
    seed: int = 0
    burn_in: float = 0.2
    thin: int = 5
    drop_rate: float = 0.5
    adapt_step: bool = False

    def __post_init__(self):
        if self.method not in ("hmc", "vi", "mcd"):
            raise ValueError(f"unknown method {self.method!r}")
        if min(self.leapfrog_steps, self.iterations, self.batch_size, self.thin) < 1:
            raise ValueError("counts must be positive")
        if self.step_size <= 0 or self.learning_rate <= 0:
            raise ValueError("step size and learning rate must be positive")
        if not 0 <= self.burn_in < 1 or not 0 <= self.drop_rate < 1:
            raise ValueError("burn_in and drop_rate must lie in [0, 1)")


# --- posteriors -------------------------------------------------------------

@dataclass
class HmcEnsemble:
    arch: Architecture
    samples: np.ndarray
    accept_rate: float
    config: Optional[TrainConfig] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if len(self.samples) == 0 or self.samples.shape[1] != self.arch.n_params:
            raise ValueError("ensemble must be nonempty with n_params columns")


@dataclass
class ViGaussian:
    arch: Architecture
    mu: np.ndarray
    log_sigma: np.ndarray
    config: Optional[TrainConfig] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != (self.arch.n_params,) or self.log_sigma.shape != self.mu.shape:
            raise ValueError("mu and log_sigma must have length n_params")


@dataclass
class McDropout:
    """Point weights plus one drop rate per ReLU layer (in layer order)."""

    arch: Architecture
    point_weights: np.ndarray
    drop_rates: tuple
    config: Optional[TrainConfig] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.point_weights = np.asarray(self.point_weights, dtype=np.float64)
        self.drop_rates = tuple(float(r) for r in self.drop_rates)
        if self.point_weights.shape != (self.arch.n_params,):
            raise ValueError("point_weights must have length n_params")
        if any(not 0 <= r < 1 for r in self.drop_rates):
            raise ValueError("drop rates must lie in [0, 1)")
        if len(self.drop_rates) != len(relu_layers(self.arch)):
            raise ValueError("need one drop rate per ReLU layer")
        for i, r in zip(relu_layers(self.arch), self.drop_rates):
            if r > 0:
                _consumer(self.arch, i)


Posterior = Union[HmcEnsemble, ViGaussian, McDropout]


def relu_layers(arch: Architecture) -> list:
    return [i for i, layer in enumerate(arch.layers) if isinstance(layer, ReLU)]


def _consumer(arch: Architecture, relu_index: int) -> int:
    # dropout on an activation is folded into the columns of the next dense layer
    for j in range(relu_index + 1, len(arch.layers)):
        layer = arch.layers[j]
        if isinstance(layer, Dense):
            return j
        if not isinstance(layer, Flatten):
            break
    raise ValueError(f"dropout after layer {relu_index} must feed a dense layer")


def dropout_masks(arch: Architecture, rates: Sequence[float], rng: np.random.Generator,
                  batch: Optional[int] = None) -> dict:
    """Scaled Bernoulli keep-masks ``{relu_index: mask}`` (inverted dropout)."""
    masks = {}
    for i, r in zip(relu_layers(arch), rates):
        if r <= 0:
            continue
        shape = arch.shapes[i + 1] if batch is None else (batch,) + arch.shapes[i + 1]
        masks[i] = (rng.random(shape) >= r) / (1.0 - r)
    return masks


def sample_weights(post: Posterior, rng: np.random.Generator) -> np.ndarray:
    """Draw one weight vector from the posterior."""
    if isinstance(post, HmcEnsemble):
        return post.samples[rng.integers(len(post.samples))].copy()
    if isinstance(post, ViGaussian):
        eps = rng.standard_normal(post.mu.shape)
        return post.mu + np.exp(post.log_sigma) * eps
    if isinstance(post, McDropout):
        w = post.point_weights.copy()
        params = post.arch.unpack(w)
        for i, mask in dropout_masks(post.arch, post.drop_rates, rng).items():
            W, _ = params[_consumer(post.arch, i)]
            W *= mask.ravel()[None, :]
        return w
    raise TypeError(f"unknown posterior {type(post).__name__}")


# --- likelihoods ------------------------------------------------------------

class ClassifierLikelihood:
    """Categorical (softmax) log-likelihood of a labelled dataset."""

    def __init__(self, arch: Architecture, inputs, labels):
        self.arch = arch
        self.X = np.asarray(inputs, dtype=np.float64)
        self.y = np.asarray(labels, dtype=np.int64)
        self.n_params = arch.n_params
        self.n_data = len(self.y)

    def log_lik_and_grad(self, w, idx=None, masks=None):
        """Summed log-likelihood over ``idx`` (all data if ``None``) and its gradient."""
        X, y = (self.X, self.y) if idx is None else (self.X[idx], self.y[idx])
        if len(y) == 0:
            return 0.0, np.zeros(self.n_params)
        loss, grad = nn.loss_and_grad(self.arch, w, X, y, masks=masks)
        return -loss * len(y), -grad * len(y)


class GaussianMeanLikelihood:
    """``y_i ~ N(w, noise_var)`` with a single unknown mean ``w``."""

    def __init__(self, y, noise_var: float = 1.0):
        self.y = np.asarray(y, dtype=np.float64)
        self.noise_var = float(noise_var)
        self.n_params = 1
        self.n_data = len(self.y)

    def log_lik_and_grad(self, w, idx=None, masks=None):
        y = self.y if idx is None else self.y[idx]
        r = y - w[0]
        return float(-0.5 * np.sum(r * r) / self.noise_var), np.array([np.sum(r) / self.noise_var])

    def posterior(self, prior_mean: float, prior_var: float) -> tuple:
        """Closed-form posterior mean and variance."""
        precision = 1.0 / prior_var + self.n_data / self.noise_var
        mean = (prior_mean / prior_var + self.y.sum() / self.noise_var) / precision
        return mean, 1.0 / precision


# --- HMC --------------------------------------------------------------------

def leapfrog(q, p, grad_potential, step_size: float, n_steps: int):
    """Leapfrog integration of Hamiltonian dynamics with unit mass matrix."""
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    p -= 0.5 * step_size * grad_potential(q)
    for i in range(n_steps):
        q += step_size * p
        if i < n_steps - 1:
            p -= step_size * grad_potential(q)
    p -= 0.5 * step_size * grad_potential(q)
    return q, p


def hmc_chain(potential_and_grad, q0, step_size: float, n_steps: int, iterations: int,
              rng: np.random.Generator, adapt_until: int = 0, target_accept: float = 0.8):
    """Run an HMC chain; returns ``(chain, accept_rate, diagnostics)``.

    ``potential_and_grad(q)`` returns ``(U(q), grad U(q))``.  Trajectories whose
    energy becomes non-finite are rejected and counted.  For the first
    ``adapt_until`` iterations the log step size follows a Robbins-Monro update
    towards ``target_accept``; it is frozen afterwards, so the remaining chain
    is a plain fixed-step HMC chain.  The reported accept rate covers only the
    post-adaptation iterations when adaptation is on.
    """
    q = np.array(q0, dtype=np.float64)
    U, g = potential_and_grad(q)
    chain = np.empty((iterations, q.size))
    accepted = 0
    nonfinite = 0
    energy_errors = []
    log_step = math.log(step_size)
    for t in range(iterations):
        if t == adapt_until:
            accepted = 0
        if t < adapt_until:
            step_size = math.exp(log_step)
        p = rng.standard_normal(q.size)
        H0 = U + 0.5 * p @ p
        qn, pn = q.copy(), p - 0.5 * step_size * g
        Un, gn = U, g
        ok = True
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(n_steps):
                qn = qn + step_size * pn
                Un, gn = potential_and_grad(qn)
                if not (np.isfinite(Un) and np.all(np.isfinite(gn))):
                    ok = False
                    break
                pn = pn - (step_size if i < n_steps - 1 else 0.5 * step_size) * gn
            H1 = Un + 0.5 * pn @ pn if ok else np.inf
        accept_prob = 0.0
        if not np.isfinite(H1):
            nonfinite += 1
        else:
            dH = H1 - H0
            energy_errors.append(abs(dH))
            accept_prob = 1.0 if dH <= 0 else math.exp(-dH)
            if dH <= 0 or rng.random() < accept_prob:
                q, U, g = qn, Un, gn
                accepted += 1
        if t < adapt_until:
            log_step += (accept_prob - target_accept) / math.sqrt(t + 10)
        chain[t] = q
    diagnostics = {"nonfinite_trajectories": nonfinite,
                   "mean_abs_energy_error": float(np.mean(energy_errors)) if energy_errors else float("nan"),
                   "step_size": step_size}
    return chain, accepted / (iterations - min(adapt_until, iterations - 1)), diagnostics


def _posterior_potential(lik, prior_mean, prior_var):
    def potential_and_grad(w):
        ll, g = lik.log_lik_and_grad(w)
        d = w - prior_mean
        return -ll + 0.5 * np.sum(d * d / prior_var), -g + d / prior_var
    return potential_and_grad


def hmc_sample_posterior(lik, prior: PriorSpec, cfg: TrainConfig, arch=None, w0=None) -> tuple:
    """HMC over a generic likelihood; returns thinned post-burn-in samples, accept rate, diagnostics."""
    rng = np.random.default_rng(cfg.seed)
    mean, var = prior.vectors(arch if arch is not None else lik.n_params)
    if w0 is None:
        w0 = nn.init_weights(arch, rng) if arch is not None else mean.copy()
    start = int(cfg.burn_in * cfg.iterations)
    chain, rate, diag = hmc_chain(_posterior_potential(lik, mean, var), w0, cfg.step_size,
                                  cfg.leapfrog_steps, cfg.iterations, rng,
                                  adapt_until=start if cfg.adapt_step else 0)
    samples = chain[start::cfg.thin]
    log.info("hmc: accept rate %.3f, %d samples kept", rate, len(samples))
    return samples, rate, diag


def hmc_train(arch: Architecture, data, prior: PriorSpec, cfg: TrainConfig) -> HmcEnsemble:
    if cfg.method != "hmc":
        raise ValueError("config method must be 'hmc'")
    lik = ClassifierLikelihood(arch, data.inputs, data.labels)
    samples, rate, diag = hmc_sample_posterior(lik, prior, cfg, arch=arch)
    return HmcEnsemble(arch, samples, rate, cfg, diag)


# --- VI ---------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Descent step on ``params`` given ``grad`` of the objective to minimise."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def gaussian_kl(mu, log_sigma, prior_mean, prior_var) -> float:
    """KL(N(mu, sigma^2) || N(prior_mean, prior_var)), summed over coordinates."""
    var = np.exp(2 * log_sigma)
    return float(np.sum(0.5 * np.log(prior_var) - log_sigma
                        + (var + (mu - prior_mean) ** 2) / (2 * prior_var) - 0.5))


def elbo(lik, mu, log_sigma, prior_mean, prior_var, rng, draws: int = 64) -> float:
    """Monte Carlo ELBO on the full dataset."""
    total = 0.0
    for _ in range(draws):
        w = mu + np.exp(log_sigma) * rng.standard_normal(mu.shape)
        total += lik.log_lik_and_grad(w)[0]
    return total / draws - gaussian_kl(mu, log_sigma, prior_mean, prior_var)


def vi_fit(lik, prior: PriorSpec, cfg: TrainConfig, arch=None, mu0=None, log_sigma0=None,
           track_elbo_every: int = 0, elbo_seed: int = 12345) -> tuple:
    """Maximise the ELBO of a mean-field Gaussian; returns ``(mu, log_sigma, trace)``."""
    rng = np.random.default_rng(cfg.seed)
    mean, var = prior.vectors(arch if arch is not None else lik.n_params)
    if mu0 is None:
        mu0 = nn.init_weights(arch, rng) if arch is not None else mean.copy()
    if log_sigma0 is None:
        log_sigma0 = np.log(0.1 * np.sqrt(var)) if arch is None else np.full(lik.n_params, -5.0)
    theta = np.concatenate([np.asarray(mu0, dtype=np.float64), np.asarray(log_sigma0, dtype=np.float64)])
    n = lik.n_params
    opt = Adam(cfg.learning_rate)
    trace = []
    for it in range(cfg.iterations):
        mu, ls = theta[:n], theta[n:]
        sigma = np.exp(ls)
        eps = rng.standard_normal(n)
        w = mu + sigma * eps
        if lik.n_data:
            idx = rng.choice(lik.n_data, min(cfg.batch_size, lik.n_data), replace=False)
            ll, g = lik.log_lik_and_grad(w, idx)
            scale = lik.n_data / len(idx)
            ll, g = ll * scale, g * scale
        else:
            ll, g = 0.0, np.zeros(n)
        kl = gaussian_kl(mu, ls, mean, var)
        if not (np.isfinite(ll) and np.isfinite(kl)):
            raise TrainingError(f"ELBO became non-finite at iteration {it}")
        # gradients of -ELBO
        g_mu = -g + (mu - mean) / var
        g_ls = -g * eps * sigma + (sigma * sigma / var - 1.0)
        theta = opt.step(theta, np.concatenate([g_mu, g_ls]))
        if track_elbo_every and (it + 1) % track_elbo_every == 0:
            trace.append(elbo(lik, theta[:n], theta[n:], mean, var, np.random.default_rng(elbo_seed)))
    return theta[:n].copy(), theta[n:].copy(), trace


def vi_train(arch: Architecture, data, prior: PriorSpec, cfg: TrainConfig) -> ViGaussian:
    if cfg.method != "vi":
        raise ValueError("config method must be 'vi'")
    lik = ClassifierLikelihood(arch, data.inputs, data.labels)
    mu, ls, _ = vi_fit(lik, prior, cfg, arch=arch)
    return ViGaussian(arch, mu, ls, cfg)


# --- MC dropout -------------------------------------------------------------

def mcd_train(arch: Architecture, data, prior: PriorSpec, cfg: TrainConfig,
              drop_rates: Optional[Sequence[float]] = None) -> McDropout:
    """Minibatch SGD on cross-entropy plus the prior's L2 penalty, with dropout."""
    if cfg.method != "mcd":
        raise ValueError("config method must be 'mcd'")
    relus = relu_layers(arch)
    rates = tuple(drop_rates) if drop_rates is not None else tuple(cfg.drop_rate for _ in relus)
    McDropout(arch, np.zeros(arch.n_params), rates)  # validates the rates up front
    rng = np.random.default_rng(cfg.seed)
    mean, var = prior.vectors(arch)
    X = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    N = len(y)
    w = nn.init_weights(arch, rng)
    for it in range(cfg.iterations):
        idx = rng.choice(N, min(cfg.batch_size, N), replace=False)
        masks = dropout_masks(arch, rates, rng, batch=len(idx))
        loss, g = nn.loss_and_grad(arch, w, X[idx], y[idx], masks=masks)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at iteration {it}")
        w = w - cfg.learning_rate * (g + (w - mean) / (var * N))
    return McDropout(arch, w, rates, cfg)


def train(arch: Architecture, data, prior: PriorSpec, cfg: TrainConfig) -> Posterior:
    return {"hmc": hmc_train, "vi": vi_train, "mcd": mcd_train}[cfg.method](arch, data, prior, cfg)


def config_dict(cfg: Optional[TrainConfig]) -> Optional[dict]:
    return None if cfg is None else asdict(cfg)
