"""Per-sample verification of one deterministic network.

Two families of checkers decide whether a sampled network violates a
robustness property on a box region around a test point:

* ``Reachability``: interval bound propagation inside a branch-and-bound
  search for the extrema of a scalar output functional over the region.
* ``Fgsm`` / ``Pgd``: sign-gradient attacks.  These can only ever prove a
  violation (they under-approximate existence).

Interval arithmetic is carried out in ordinary float64 without directed
rounding, so enclosures are sound up to floating-point rounding error.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import nn
from .estimate import sample_class
from .nn import Conv2D, CrossEntropy, Dense, Flatten, Likelihood, Logit, LogitDiff, Network, ReLU


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Box around ``center``: coordinates in ``feature_mask`` may move by ``epsilon``.

    ``feature_mask`` holds flat indices into the input; ``None`` frees every
    coordinate.  All coordinates are clamped to ``clamp``.
    """

    center: np.ndarray
    epsilon: float
    feature_mask: Optional[tuple] = None
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64)
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.clamp[0] < self.clamp[1]:
            raise ValueError("clamp must satisfy low < high")
        if self.feature_mask is not None:
            mask = tuple(sorted(int(i) for i in self.feature_mask))
            if mask and (mask[0] < 0 or mask[-1] >= center.size):
                raise ValueError("feature_mask index out of range")
            object.__setattr__(self, "feature_mask", mask)

    @property
    def free(self) -> np.ndarray:
        if self.feature_mask is None:
            return np.arange(self.center.size)
        return np.asarray(self.feature_mask, dtype=np.int64)

    def bounds(self):
        """Full-shape ``(low, high)`` arrays of the box."""
        lo = self.center.ravel().copy()
        hi = lo.copy()
        idx = self.free
        low, high = self.clamp
        lo[idx] = np.maximum(lo[idx] - self.epsilon, low)
        hi[idx] = np.minimum(hi[idx] + self.epsilon, high)
        return lo.reshape(self.center.shape), hi.reshape(self.center.shape)

    def project(self, x) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(x, lo, hi)

    def contains(self, x, atol: float = 1e-12) -> bool:
        lo, hi = self.bounds()
        x = np.asarray(x)
        return bool(np.all(x >= lo - atol) and np.all(x <= hi + atol))


@dataclass(frozen=True)
class Phi1:
    """Likelihood-discrepancy property: some x in T moves the softmax by more than ``delta``."""
    delta: float
    norm: str = "linf"

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.norm not in ("l1", "l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass(frozen=True)
class Phi2:
    """Classification property: the class drawn at some x in T differs from the class at x*.

    ``use_argmax`` takes the argmax class at the worst-case point instead of
    re-drawing it from the softmax.
    """
    use_argmax: bool = False


PropertySpec = Union[Phi1, Phi2]


@dataclass(frozen=True)
class Reachability:
    tolerance: float = 1e-3
    max_splits: int = 2000

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class Fgsm:
    eps: Optional[float] = None  # defaults to the region radius


@dataclass(frozen=True)
class Pgd:
    eps: Optional[float] = None
    steps: int = 10
    step_size: Optional[float] = None  # defaults to eps / 4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


VerifyMethod = Union[Reachability, Fgsm, Pgd]


@dataclass(frozen=True)
class RobustnessQuery:
    x_star: np.ndarray
    region: Region
    prop: PropertySpec
    method: VerifyMethod


@dataclass
class VerdictSample:
    sat: bool
    witness: Optional[np.ndarray] = None
    sampled_class: Optional[int] = None
    work: int = 0
    inconclusive: bool = False
    drawn_class: Optional[int] = None


# --- interval bound propagation ---------------------------------------------

def _propagate(arch, params, mid, rad, start=0):
    """Centre/radius interval propagation of a batch through ``arch.layers[start:]``."""
    for layer, p in zip(arch.layers[start:], params[start:]):
        if isinstance(layer, Dense):
            W, b = p
            mid, rad = mid @ W.T + b, rad @ np.abs(W).T
        elif isinstance(layer, Conv2D):
            K, b = p
            mid = nn._conv_forward(mid, K, b, layer.stride)
            rad = nn._conv_forward(rad, np.abs(K), np.zeros_like(b), layer.stride)
        elif isinstance(layer, ReLU):
            lo = np.maximum(mid - rad, 0.0)
            hi = np.maximum(mid + rad, 0.0)
            mid, rad = 0.5 * (lo + hi), 0.5 * (hi - lo)
        elif isinstance(layer, Flatten):
            mid = mid.reshape(mid.shape[0], -1)
            rad = rad.reshape(rad.shape[0], -1)
    return mid, rad


def _linear_bounds(layers, params, mid, rad):
    """Back-substituted linear bounds for a dense/ReLU stack over boxes ``mid +- rad``.

    Intermediate pre-activation bounds come from interval propagation; each
    ReLU is then relaxed linearly (chord above, 0 or identity below) and the
    output rows are pulled back to linear functions of the input.  Returns
    ``(lower, upper, v_lower, v_upper)`` where ``v_*`` are the box vertices
    minimising the lower / maximising the upper linear function, shape
    ``(batch, rows, dims)``.
    """
    pre = []
    m, r = mid, rad
    for layer, p in zip(layers, params):
        if isinstance(layer, Dense):
            W, b = p
            m, r = m @ W.T + b, r @ np.abs(W).T
        elif isinstance(layer, ReLU):
            lo, hi = m - r, m + r
            pre.append((lo, hi))
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            m, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    rows = m.shape[1]
    results = []
    for sign in (1.0, -1.0):
        lam = np.broadcast_to(sign * np.eye(rows), (len(mid), rows, rows)).copy()
        const = np.zeros((len(mid), rows))
        k = len(pre)
        for layer, p in zip(reversed(layers), reversed(params)):
            if isinstance(layer, Dense):
                W, b = p
                const += lam @ b
                lam = lam @ W
            elif isinstance(layer, ReLU):
                k -= 1
                lo, hi = pre[k]
                unstable = (lo < 0) & (hi > 0)
                width = np.where(unstable, hi - lo, 1.0)
                up_slope = np.where(hi <= 0, 0.0, np.where(lo >= 0, 1.0, hi / width))
                up_icpt = np.where(unstable, -up_slope * lo, 0.0)
                low_slope = np.where(hi <= 0, 0.0, np.where(lo >= 0, 1.0, (hi >= -lo).astype(float)))
                pos = lam >= 0
                const += np.einsum("brn,bn->br", np.where(pos, 0.0, lam), up_icpt)
                lam = lam * np.where(pos, low_slope[:, None, :], up_slope[:, None, :])
        value = np.einsum("brd,bd->br", lam, mid) - np.einsum("brd,bd->br", np.abs(lam), rad) + const
        vertex = mid[:, None, :] - np.sign(lam) * rad[:, None, :]
        results.append((sign * value, vertex))
    (lower, v_lower), (upper, v_upper) = results
    return lower, upper, v_lower, v_upper


def interval_propagate(net: Network, low, high):
    """Sound output intervals of ``net`` over the box ``[low, high]``.

    Returns ``(out_low, out_high)`` logit bounds.
    """
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if low.shape != net.input_shape or high.shape != net.input_shape:
        raise nn.ShapeError(f"box shape {low.shape} does not match input {net.input_shape}")
    if np.any(low > high):
        raise ValueError("box has low > high")
    mid, rad = _propagate(net.arch, net.params, (0.5 * (low + high))[None], (0.5 * (high - low))[None])
    return mid[0] - rad[0], mid[0] + rad[0]


class _Problem:
    """A functional restricted to the free coordinates of a region.

    Boxes are represented in the reduced coordinates ``z`` (one entry per free
    input).  When the first layer is dense, its fixed-input contribution is
    folded into the bias once.
    """

    def __init__(self, net: Network, region: Region, functional):
        self.net = net
        self.functional = functional
        lo, hi = region.bounds()
        lo, hi = lo.ravel(), hi.ravel()
        free = region.free
        free = free[hi[free] > lo[free]]
        self.free = free
        self.zlo, self.zhi = lo[free], hi[free]
        self.base = region.center.ravel().copy()
        arch, params = net.arch, list(net.params)
        self.shape = net.input_shape
        # fold the functional into the final dense layer where possible
        last = arch.layers[-1]
        self.rows = None
        if isinstance(functional, (Logit, LogitDiff, Likelihood, CrossEntropy)) and isinstance(last, Dense):
            W, b = params[-1]
            C = self._rows(functional, arch.num_classes)
            self.rows = C
            params[-1] = (C @ W, C @ b)
        self.params = params
        self.reduced_first = isinstance(arch.layers[0], Dense)
        if self.reduced_first:
            W, b = params[0]
            fixed = self.base.copy()
            fixed[free] = 0.0
            self.W0 = W[:, free]
            self.b0 = W @ fixed + b
        # linear relaxation applies to pure dense/ReLU stacks with folded rows
        self.linear = (self.reduced_first and self.rows is not None
                       and all(isinstance(l, (Dense, ReLU)) for l in arch.layers))
        if self.linear:
            self.lin_layers = arch.layers
            self.lin_params = [(self.W0, self.b0)] + params[1:]

    @staticmethod
    def _rows(functional, nc):
        if isinstance(functional, Logit):
            C = np.zeros((1, nc))
            C[0, functional.h] = 1.0
        elif isinstance(functional, LogitDiff):
            C = np.zeros((1, nc))
            C[0, functional.h] += 1.0
            C[0, functional.k] -= 1.0
        else:
            # logit differences f_j - f_h for j != h
            h = functional.h if isinstance(functional, Likelihood) else functional.target
            others = [j for j in range(nc) if j != h]
            C = np.zeros((len(others), nc))
            for r, j in enumerate(others):
                C[r, j] = 1.0
                C[r, h] = -1.0
        return C

    def full(self, Z):
        X = np.repeat(self.base[None], len(Z), axis=0)
        X[:, self.free] = Z
        return X.reshape((len(Z),) + self.shape)

    def values(self, Z):
        logits = nn.forward_batch(self.net.arch, self.net.params, self.full(Z))
        return nn.evaluate_functional(self.functional, logits)

    def bounds(self, zlo, zhi):
        """Lower/upper bounds of the functional over a batch of reduced boxes."""
        return self.bounds_and_vertices(zlo, zhi)[:2]

    def bounds_and_vertices(self, zlo, zhi):
        """Bounds plus candidate points ``(batch, m, dims)`` suggested by the relaxation."""
        arch = self.net.arch
        mid_z, rad_z = 0.5 * (zlo + zhi), 0.5 * (zhi - zlo)
        verts = np.empty((len(zlo), 0, len(self.free)))
        if self.linear:
            lo, hi, v_lo, v_hi = _linear_bounds(self.lin_layers, self.lin_params, mid_z, rad_z)
            verts = np.concatenate([v_lo, v_hi], axis=1)
            m, r = _propagate(arch, self.params, mid_z @ self.W0.T + self.b0, rad_z @ np.abs(self.W0).T, start=1)
            lo, hi = np.maximum(lo, m - r), np.minimum(hi, m + r)
            return self._finish(lo, hi) + (verts,)
        if self.reduced_first:
            mid = mid_z @ self.W0.T + self.b0
            rad = rad_z @ np.abs(self.W0).T
            mid, rad = _propagate(arch, self.params, mid, rad, start=1)
        else:
            lo = np.repeat(self.base[None], len(zlo), axis=0)
            hi = lo.copy()
            lo[:, self.free] = zlo
            hi[:, self.free] = zhi
            shape = (len(zlo),) + self.shape
            mid, rad = _propagate(arch, self.params, (0.5 * (lo + hi)).reshape(shape),
                                  (0.5 * (hi - lo)).reshape(shape))
        lo, hi = mid - rad, mid + rad
        if self.rows is None:
            # generic fallback on raw logit intervals
            lo, hi = self._fold_intervals(lo, hi)
        return self._finish(lo, hi) + (verts,)

    def _finish(self, lo, hi):
        # map bounds on the folded rows to bounds on the functional
        f = self.functional
        if isinstance(f, (Logit, LogitDiff)):
            return lo[:, 0], hi[:, 0]
        # d_j = f_j - f_h in [lo_j, hi_j]
        if isinstance(f, Likelihood):
            return (1.0 / (1.0 + np.exp(hi).sum(axis=1)), 1.0 / (1.0 + np.exp(lo).sum(axis=1)))
        # cross-entropy = log(1 + sum_j exp(d_j))
        return np.log1p(np.exp(lo).sum(axis=1)), np.log1p(np.exp(hi).sum(axis=1))

    def _fold_intervals(self, lo, hi):
        C = self._rows(self.functional, self.net.num_classes)
        Cp, Cn = np.maximum(C, 0), np.minimum(C, 0)
        return lo @ Cp.T + hi @ Cn.T, hi @ Cp.T + lo @ Cn.T

    def candidates(self, zlo, zhi):
        d = len(zlo)
        pts = [0.5 * (zlo + zhi)]
        if d <= 3:
            for signs in itertools.product((0, 1), repeat=d):
                pts.append(np.where(np.array(signs, dtype=bool), zhi, zlo))
        return np.array(pts)


@dataclass
class ReachResult:
    lower: float
    upper: float
    argmin: np.ndarray
    argmax: np.ndarray
    min_value: float
    max_value: float
    tolerance_met: bool
    splits: int


def _search(prob: _Problem, sign: float, tol: float, max_splits: int):
    """Branch and bound minimising ``sign * functional``; returns (bound, best_z, best_val, met, splits)."""
    def lb(zlo, zhi):
        lo, hi, verts = prob.bounds_and_vertices(zlo, zhi)
        return (lo if sign > 0 else -hi), verts

    def evaluate(zlo, zhi, extra):
        pts = np.concatenate([prob.candidates(zlo, zhi), extra])
        vals = sign * prob.values(pts)
        i = int(np.argmin(vals))
        return pts[i], float(vals[i])

    root, root_verts = lb(prob.zlo[None], prob.zhi[None])
    root_lb = float(root[0])
    best_z, best = evaluate(prob.zlo, prob.zhi, root_verts[0])
    counter = itertools.count()
    heap = [(root_lb, next(counter), prob.zlo, prob.zhi)]
    pruned = np.inf
    splits = 0
    met = False
    while True:
        frontier = min(heap[0][0] if heap else np.inf, pruned)
        if best - frontier <= tol:
            met = True
            break
        if splits >= max_splits:
            break
        _, _, zlo, zhi = heapq.heappop(heap)
        j = int(np.argmax(zhi - zlo))
        cut = 0.5 * (zlo[j] + zhi[j])
        left_hi, right_lo = zhi.copy(), zlo.copy()
        left_hi[j] = cut
        right_lo[j] = cut
        children = [(zlo, left_hi), (right_lo, zhi)]
        splits += 1
        bounds, verts = lb(np.array([c[0] for c in children]), np.array([c[1] for c in children]))
        for (clo, chi), vs in zip(children, verts):
            z, v = evaluate(clo, chi, vs)
            if v < best:
                best, best_z = v, z
        for (clo, chi), b in zip(children, bounds):
            b = float(b)
            if b < best - tol:
                heapq.heappush(heap, (b, next(counter), clo, chi))
            else:
                pruned = min(pruned, b)
    frontier = min(heap[0][0] if heap else np.inf, pruned, best)
    return frontier, best_z, best, met, splits


def reach_extrema(net: Network, region: Region, functional, tol: float = 1e-3,
                  max_splits: int = 2000) -> ReachResult:
    """Sound enclosure of ``functional`` over ``region`` with minimising/maximising witnesses.

    Guarantees ``lower <= min <= value(argmin) <= value(argmax) <= max <= upper``
    (up to float rounding).  ``tolerance_met`` is false when ``max_splits``
    ran out before both gaps closed to ``tol``; the bounds remain sound.
    """
    prob = _Problem(net, region, functional)
    if len(prob.free) == 0:
        x = region.center.copy()
        v = float(nn.evaluate_functional(functional, nn.forward(net, x)))
        return ReachResult(v, v, x, x.copy(), v, v, True, 0)
    lo_b, zmin, vmin, met_min, s1 = _search(prob, 1.0, tol, max_splits)
    neg_hi, zmax, neg_vmax, met_max, s2 = _search(prob, -1.0, tol, max_splits)
    xmin = prob.full(zmin[None])[0]
    xmax = prob.full(zmax[None])[0]
    # report witness values from a plain forward pass
    vmin = float(nn.evaluate_functional(functional, nn.forward(net, xmin)))
    vmax = float(nn.evaluate_functional(functional, nn.forward(net, xmax)))
    return ReachResult(min(lo_b, vmin), max(-neg_hi, vmax), xmin, xmax, vmin, vmax,
                       met_min and met_max, s1 + s2)


# --- attacks ---------------------------------------------------------------------

def _signed_step(net, x, region, target_class, size):
    g = nn.grad_input(net, x, CrossEntropy(target_class))
    step = np.zeros(x.size)
    free = region.free
    step[free] = size * np.sign(g.ravel()[free])
    return step.reshape(x.shape)


def _attack_ball(region: Region, eps):
    # the attack never leaves T; a smaller attack radius shrinks the box further
    if eps is None or eps >= region.epsilon:
        return region
    return Region(region.center, eps, region.feature_mask, region.clamp)


def fgsm(net: Network, x_star, region: Region, target_class: int, eps: Optional[float] = None) -> np.ndarray:
    """One signed-gradient ascent step on the cross-entropy of ``target_class``."""
    if not 0 <= target_class < net.num_classes:
        raise ValueError("target_class out of range")
    x_star = np.asarray(x_star, dtype=np.float64)
    eps = region.epsilon if eps is None else eps
    ball = _attack_ball(region, eps)
    return ball.project(x_star + _signed_step(net, x_star, region, target_class, eps))


def pgd(net: Network, x_star, region: Region, target_class: int, eps: Optional[float] = None,
        steps: int = 10, step_size: Optional[float] = None, return_path: bool = False):
    """Projected signed-gradient ascent; every iterate stays inside the region."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0 <= target_class < net.num_classes:
        raise ValueError("target_class out of range")
    x_star = np.asarray(x_star, dtype=np.float64)
    eps = region.epsilon if eps is None else eps
    step_size = eps / 4 if step_size is None else step_size
    ball = _attack_ball(region, eps)
    x = ball.project(x_star)
    path = [x]
    for _ in range(steps):
        x = ball.project(x + _signed_step(net, x, region, target_class, step_size))
        path.append(x)
    return (x, path) if return_path else x


def _attack_point(net, x_star, region, method, target_class):
    if isinstance(method, Fgsm):
        return fgsm(net, x_star, region, target_class, method.eps), 1
    return pgd(net, x_star, region, target_class, method.eps, method.steps, method.step_size), method.steps


# --- property checks ---------------------------------------------------------------

def _discrepancy(p_ref, p, norm):
    d = np.abs(np.asarray(p_ref) - np.asarray(p))
    if norm == "linf":
        return float(d.max(axis=-1)) if d.ndim == 1 else d.max(axis=-1)
    if norm == "l1":
        return d.sum(axis=-1)
    return np.sqrt((d * d).sum(axis=-1))


def check_phi1(net: Network, x_star, region: Region, spec: Phi1, method: VerifyMethod,
               split_scale: int = 1) -> VerdictSample:
    """Decide whether some x in the region moves the softmax output by more than ``delta``."""
    x_star = np.asarray(x_star, dtype=np.float64)
    p_ref = nn.softmax(nn.forward(net, x_star))
    if isinstance(method, Reachability):
        if net.num_classes != 2:
            raise UnsupportedConfiguration("reachability for the likelihood property needs exactly 2 classes")
        r = reach_extrema(net, region, LogitDiff(0, 1), method.tolerance, method.max_splits * split_scale)
        cands = np.array([r.argmin, r.argmax])
        disc = _discrepancy(p_ref, nn.predict_proba(net, cands), spec.norm)
        i = int(np.argmax(disc))
        sat = bool(disc[i] > spec.delta)
        if not r.tolerance_met and not sat:
            # the discrepancy is monotone in the logit difference: check the outer bounds
            outer = nn.softmax(np.array([[r.lower, 0.0], [r.upper, 0.0]]))
            if _discrepancy(p_ref, outer, spec.norm).max() > spec.delta:
                return VerdictSample(False, None, work=r.splits, inconclusive=True)
        return VerdictSample(sat, cands[i] if sat else None, work=r.splits)
    target = int(np.argmax(p_ref))
    x_adv, work = _attack_point(net, x_star, region, method, target)
    disc = _discrepancy(p_ref, nn.softmax(nn.forward(net, x_adv)), spec.norm)
    sat = bool(disc > spec.delta)
    return VerdictSample(sat, x_adv if sat else None, work=work)


def check_phi2(net: Network, x_star, region: Region, sampled_class: int, method: VerifyMethod,
               rng: np.random.Generator, use_argmax: bool = False, split_scale: int = 1) -> VerdictSample:
    """Draw the class at the worst-case point of the region and compare with ``sampled_class``."""
    x_star = np.asarray(x_star, dtype=np.float64)
    if isinstance(method, Reachability):
        r = reach_extrema(net, region, Likelihood(sampled_class), method.tolerance,
                          method.max_splits * split_scale)
        x_w, work = r.argmin, r.splits
    else:
        x_w, work = _attack_point(net, x_star, region, method, sampled_class)
        r = None
    probs = nn.softmax(nn.forward(net, x_w))
    drawn = int(np.argmax(probs)) if use_argmax else sample_class(probs, rng)
    sat = drawn != sampled_class
    if r is not None and not r.tolerance_met and not sat:
        return VerdictSample(False, None, sampled_class, work, inconclusive=True, drawn_class=drawn)
    return VerdictSample(sat, x_w if sat else None, sampled_class, work, drawn_class=drawn)


def verify(net: Network, query: RobustnessQuery, rng: np.random.Generator,
           sampled_class: Optional[int] = None, split_scale: int = 1) -> VerdictSample:
    """Dispatch a query to the matching property checker."""
    if isinstance(query.prop, Phi1):
        return check_phi1(net, query.x_star, query.region, query.prop, query.method, split_scale)
    if sampled_class is None:
        raise ValueError("the classification property needs a sampled class")
    return check_phi2(net, query.x_star, query.region, sampled_class, query.method, rng,
                      query.prop.use_argmax, split_scale)
