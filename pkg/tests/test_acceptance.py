"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""
import csv
import math
import time

import numpy as np
import pytest

from bnnrobust import bayes, cli, dataio, nn
from bnnrobust.estimate import (ConfidenceInterval, EstimationConfig, chernoff_bound, chernoff_n,
                                estimate_robustness, massart_curve, massart_n, sequential_estimate)
from bnnrobust.nn import LogitDiff, Network
from bnnrobust.verify import (Phi1, Reachability, Region, RobustnessQuery, check_phi1,
                              interval_propagate, reach_extrema)

pytestmark = pytest.mark.slow

THETA = GAMMA = 0.075
ALPHA = 0.05


class Bernoulli:
    def __init__(self, p, seed):
        self.p, self.seed = p, seed

    def __call__(self, index):
        return bool(np.random.default_rng([self.seed, index]).random() < self.p)


def test_criterion_1_bound_anchors(acceptance_report):
    c = chernoff_n(THETA, GAMMA)
    lo = math.ceil(massart_n(THETA, GAMMA, ALPHA, ConfidenceInterval(0.0, 0.1, 0.95)))
    hi = math.ceil(massart_n(THETA, GAMMA, ALPHA, ConfidenceInterval(0.9, 1.0, 0.95)))
    acceptance_report(1, (c, lo, hi) == (292, 171, 181), f"chernoff={c}, massart(b=0.1)={lo}, massart(a=0.9)={hi}")


def test_criterion_2_crossover(acceptance_report):
    c = chernoff_bound(THETA, GAMMA)
    grid = np.round(np.linspace(0, 1, 100001), 5)
    chern = np.array([massart_curve(THETA, GAMMA, ALPHA, e) >= c for e in grid])
    lo, hi = grid[chern].min(), grid[chern].max()
    contiguous = bool(chern[(grid >= lo) & (grid <= hi)].all())
    ok = contiguous and lo <= 0.25 and hi >= 0.75 and lo >= 0.20 and hi <= 0.82
    acceptance_report(2, ok, f"Chernoff governs on [{lo:.4f}, {hi:.4f}] (contiguous={contiguous})")


def test_criterion_3_guarantee(acceptance_report):
    cfg = EstimationConfig()
    rates = {}
    for p in (0.1, 0.5, 0.9):
        misses = 0
        for run in range(1000):
            res = sequential_estimate(Bernoulli(p, seed=run + int(p * 1e6)), cfg)
            misses += abs(res.p_hat - p) > THETA
        rates[p] = misses / 1000
    ok = all(r <= GAMMA for r in rates.values())
    acceptance_report(3, ok, "miss rates " + ", ".join(f"p={p}: {r:.3f}" for p, r in rates.items())
                      + f" (limit {GAMMA})")


def _random_net(rng):
    d = int(rng.integers(2, 6))
    sizes = [d] + [int(rng.integers(3, 16)) for _ in range(int(rng.integers(1, 3)))] + [int(rng.integers(2, 4))]
    arch = nn.dense_net(sizes)
    return Network(arch, rng.normal(size=arch.n_params))


def test_criterion_4_enclosure(acceptance_report):
    rng = np.random.default_rng(2024)
    escapes = sandwich_failures = 0
    for _ in range(1000):
        net = _random_net(rng)
        d = net.input_shape[0]
        center = rng.uniform(0, 1, d)
        radius = rng.uniform(0, 0.3, d)
        low, high = center - radius, center + radius
        out_lo, out_hi = interval_propagate(net, low, high)
        X = rng.uniform(low, high, size=(10_000, d))
        Y = nn.forward_batch(net.arch, net.params, X)
        escapes += int(np.any(Y < out_lo - 1e-12) or np.any(Y > out_hi + 1e-12))
        region = Region(center, float(radius.max()), clamp=(-1.0, 2.0))
        r = reach_extrema(net, region, LogitDiff(0, 1), tol=1e-3, max_splits=50)
        lo_r, hi_r = region.bounds()
        vals = nn.evaluate_functional(LogitDiff(0, 1), nn.forward_batch(
            net.arch, net.params, rng.uniform(lo_r, hi_r, size=(10_000, d))))
        sandwich = (r.lower <= r.min_value <= r.max_value <= r.upper
                    and vals.min() >= r.lower - 1e-12 and vals.max() <= r.upper + 1e-12)
        sandwich_failures += int(not sandwich)
    ok = escapes == 0 and sandwich_failures == 0
    acceptance_report(4, ok, f"{escapes} interval escapes, {sandwich_failures} sandwich failures over 1000 pairs")


def _grid_max_discrepancy(net, region, x_star, norm):
    p_ref = nn.softmax(nn.forward(net, x_star))
    lo, hi = region.bounds()
    free = region.free
    axes = [np.linspace(lo[i], hi[i], 100_001 if len(free) == 1 else 1001) for i in free]
    mesh = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    best = 0.0
    for chunk in np.array_split(mesh, max(1, len(mesh) // 100_000)):
        X = np.repeat(x_star[None], len(chunk), axis=0)
        X[:, free] = chunk
        d = np.abs(nn.predict_proba(net, X) - p_ref).max(axis=1)
        best = max(best, float(d.max()))
    return best


def test_criterion_5_reachability_vs_grid(acceptance_report):
    rng = np.random.default_rng(55)
    agree = 0
    sat_cases = 0
    for i in range(50):
        d = int(rng.integers(2, 6))
        arch = nn.dense_net([d, int(rng.integers(4, 24)), 2])
        net = Network(arch, rng.normal(size=arch.n_params))
        x_star = rng.uniform(0, 1, d)
        mask = tuple(rng.choice(d, 1 + i % 2, replace=False))
        region = Region(x_star, float(rng.uniform(0.05, 0.4)), mask)
        m = _grid_max_discrepancy(net, region, x_star, "linf")
        delta = max(0.0, m + rng.choice([-1, 1]) * rng.uniform(0.005, 0.05))
        oracle = m > delta
        v = check_phi1(net, x_star, region, Phi1(delta, "linf"), Reachability(1e-3, 5000))
        agree += int(v.sat == oracle and not v.inconclusive)
        sat_cases += int(oracle)
    acceptance_report(5, agree == 50, f"{agree}/50 verdicts agree with the grid oracle ({sat_cases} sat cases)")


def test_criterion_6_inference(acceptance_report):
    y = np.random.default_rng(6).normal(1.3, 1.0, size=20)
    lik = bayes.GaussianMeanLikelihood(y)
    mean, var = lik.posterior(0.0, 1.0)
    cfg = bayes.TrainConfig(method="hmc", step_size=0.1, leapfrog_steps=5, iterations=25_000, seed=5, thin=1)
    samples, _, _ = bayes.hmc_sample_posterior(lik, bayes.PriorSpec(), cfg)
    x = samples[:, 0]
    batch_means = np.array([b.mean() for b in np.array_split(x, 50)])
    se = batch_means.std(ddof=1) / np.sqrt(50)
    hmc_ok = abs(x.mean() - mean) < 3 * se
    vcfg = bayes.TrainConfig(method="vi", iterations=4000, learning_rate=0.01, batch_size=20, seed=7)
    mu, ls, _ = bayes.vi_fit(lik, bayes.PriorSpec(), vcfg)
    mu_err = abs(mu[0] - mean) / abs(mean)
    sd_err = abs(np.exp(ls[0]) - math.sqrt(var)) / math.sqrt(var)
    vi_ok = mu_err < 0.05 and sd_err < 0.05
    acceptance_report(6, hmc_ok and vi_ok,
                      f"HMC mean err {abs(x.mean() - mean):.4f} (3 SE = {3 * se:.4f}); "
                      f"VI rel err mean {mu_err:.4f}, std {sd_err:.4f}")


@pytest.fixture(scope="module")
def mcd_fcn512(tmp_path_factory):
    out = tmp_path_factory.mktemp("mcd") / "mcd.json"
    t0 = time.time()
    assert cli.main(["train", "--method", "mcd", "--arch", "fcn512", "--data", "mnist17", "--seed", "7",
                     "--out", str(out)]) == 0
    return out, time.time() - t0


def test_criterion_7_sweep_trend(acceptance_report, mcd_fcn512, tmp_path):
    path, _ = mcd_fcn512
    post = dataio.load_posterior(path)
    test = dataio.load_mnist17("test")
    point = Network(post.arch, post.point_weights)
    conf = nn.predict_proba(point, test.inputs).max(axis=1)
    index = int(np.flatnonzero((conf >= 0.75) & (conf <= 0.9))[0])
    grad = np.abs(nn.grad_input(point, test.inputs[index], LogitDiff(0, 1))).reshape(28, 28)
    _, r, c = max((grad[r:r + 3, c:c + 3].sum(), r, c) for r in range(26) for c in range(26))
    out = tmp_path / "sweep.csv"
    t0 = time.time()
    assert cli.main(["sweep", "--posterior", str(path), "--input-index", str(index),
                     "--mask", f"patch:{r},{c},3,3", "--eps-grid", "0.1,0.3,0.5",
                     "--delta-grid", "0.05,0.15,0.3", "--out", str(out)]) == 0
    elapsed = time.time() - t0
    with open(out, newline="") as f:
        grid = np.array([float(row["p_hat"]) for row in csv.DictReader(f)]).reshape(3, 3)
    tol = 2 * THETA
    eps_ok = bool(np.all(np.diff(grid, axis=0) <= tol))
    delta_ok = bool(np.all(np.diff(grid, axis=1) >= -tol))
    print(f"image {index}, patch ({r},{c}), robustness grid (rows eps, cols delta):\n{np.round(grid, 3)}")
    acceptance_report(7, eps_ok and delta_ok,
                      f"non-increasing in eps: {eps_ok}, non-decreasing in delta: {delta_ok} "
                      f"(tol {tol}), grid {np.round(grid, 3).tolist()}, {elapsed:.0f}s")


def test_criterion_8_degenerate_posterior(acceptance_report):
    arch = nn.dense_net([3, 8, 2])
    mu = np.random.default_rng(8).normal(size=arch.n_params) * 2
    post = bayes.ViGaussian(arch, mu, np.full(arch.n_params, -np.inf))
    x = np.array([0.2, 0.5, 0.7])
    region = Region(x, 0.3)
    values = []
    for delta in (0.0, 0.01, 0.1, 0.5, 1.0):
        res = estimate_robustness(RobustnessQuery(x, region, Phi1(delta), Reachability()), post, EstimationConfig())
        values.append(res.p_hat)
    ok = all(v in (0.0, 1.0) for v in values) and {0.0, 1.0} <= set(values)
    acceptance_report(8, ok, f"p_hat over deltas {values}")


def test_criterion_9_mcd_accuracy(acceptance_report, mcd_fcn512):
    path, seconds = mcd_fcn512
    header = __import__("json").loads(path.read_text())
    acc = header["provenance"]["test_accuracy"]
    acceptance_report(9, acc >= 0.85, f"fcn512 MCD test accuracy {acc:.4f} (floor 0.85), trained in {seconds:.0f}s")
