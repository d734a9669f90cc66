"""Command-line entry point: ``bnnrobust {train,estimate,sweep,attack-sweep,bounds}``.

Every command that writes a file also writes ``<output stem>.manifest.json``
next to it, recording the command line, the full configuration, timestamps
and the artifacts produced.  Sweep CSVs report the robustness probability
``1 - p_hat`` (the fraction of sampled networks for which no violation was
found), which is what heatmaps and violin plots are drawn from.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, bayes, dataio, estimate, nn
from .estimate import EstimationConfig
from .nn import LogitDiff
from .verify import (Fgsm, Pgd, Phi1, Phi2, Reachability, Region, RobustnessQuery, VerdictSample,
                     _discrepancy, reach_extrema)

log = logging.getLogger("bnnrobust")

MANIFEST_SCHEMA = 1
SWEEP_COLUMNS = ("epsilon", "delta", "p_hat", "n", "ci_a", "ci_b")
ATTACK_COLUMNS = ("image_id", "epsilon", "method", "p_hat")
BOUNDS_COLUMNS = ("ci_endpoint", "massart_n", "chernoff_n", "min")
CSV_SCHEMA = 1

METHOD_DEFAULTS = {
    "hmc": dict(step_size=0.01, leapfrog_steps=5, iterations=1000, learning_rate=0.01, batch_size=128),
    "vi": dict(step_size=0.01, leapfrog_steps=5, iterations=2000, learning_rate=0.001, batch_size=128),
    "mcd": dict(step_size=0.01, leapfrog_steps=5, iterations=500, learning_rate=0.05, batch_size=128),
}


class UsageError(Exception):
    pass


# --- manifests ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: Optional[int]
    started: str
    finished: str = ""
    wall_time_s: float = 0.0
    artifacts: list = field(default_factory=list)
    schemas: dict = field(default_factory=dict)
    tool_version: str = __version__
    schema_version: int = MANIFEST_SCHEMA


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _start_manifest(args, argv) -> RunManifest:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(args.command, list(argv), config, getattr(args, "seed", None), _now())


def _finish_manifest(m: RunManifest, out: Path, t0: float) -> Path:
    m.finished = _now()
    m.wall_time_s = round(time.time() - t0, 3)
    path = manifest_path(out)
    path.write_text(json.dumps(dataio.json_safe(asdict(m)), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- data and architectures ------------------------------------------------------

def load_data(name: str, split: str, image_size: int = 28, seed: int = 0, images: bool = False):
    if name == "mnist17":
        ds = dataio.load_mnist17(split, size=image_size, flatten=not images)
        if images:
            ds = dataio.Dataset(ds.inputs[:, None], ds.labels, ds.class_map)
        return ds
    if name == "blobs":
        if images:
            raise UsageError("the conv architecture needs image data (--data mnist17)")
        return dataio.synthetic_gaussian_blobs(100, 2, 0.6, seed=seed if split == "train" else seed + 1)
    raise UsageError(f"unknown dataset {name!r}")


def build_arch(name: str, input_shape: tuple, num_classes: int = 2) -> nn.Architecture:
    if name == "toy":
        return nn.dense_net([int(np.prod(input_shape)), 16, num_classes])
    if name == "fcn512":
        return nn.dense_net([int(np.prod(input_shape)), 512, num_classes])
    if name == "conv":
        c, h, w = input_shape
        return nn.Architecture(input_shape, [nn.Conv2D(25, 3, 3), nn.ReLU(), nn.Flatten(),
                                             nn.Dense(25 * (h - 2) * (w - 2), num_classes)])
    raise UsageError(f"unknown architecture {name!r}")


def predictive_accuracy(post, ds, draws: int = 50, seed: int = 0) -> float:
    """Accuracy of the posterior predictive mean over ``draws`` weight samples."""
    rng = np.random.default_rng(seed)
    probs = np.zeros((len(ds), post.arch.num_classes))
    for _ in range(draws):
        net = nn.Network(post.arch, bayes.sample_weights(post, rng))
        probs += nn.predict_proba(net, ds.inputs)
    return float(np.mean(probs.argmax(axis=1) == ds.labels))


# --- train -------------------------------------------------------------------------

def cmd_train(args, manifest: RunManifest) -> list:
    ds_kw = dict(image_size=args.image_size, seed=args.seed, images=args.arch == "conv")
    train = load_data(args.data, "train", **ds_kw)
    test = load_data(args.data, "test", **ds_kw)
    arch = build_arch(args.arch, train.input_shape, train.num_classes)
    defaults = METHOD_DEFAULTS[args.method]
    cfg = bayes.TrainConfig(
        method=args.method,
        step_size=args.step_size or defaults["step_size"],
        leapfrog_steps=args.leapfrog_steps or defaults["leapfrog_steps"],
        iterations=args.iterations or defaults["iterations"],
        learning_rate=args.learning_rate or defaults["learning_rate"],
        batch_size=args.batch_size or defaults["batch_size"],
        seed=args.seed,
        drop_rate=args.drop_rate,
        adapt_step=args.method == "hmc" and not args.fixed_step,
    )
    log.info("training %s on %s (%d params, %d examples)", args.method, args.data, arch.n_params, len(train))
    post = bayes.train(arch, train, bayes.PriorSpec.for_arch(arch), cfg)
    acc = predictive_accuracy(post, test, seed=args.seed)
    out = Path(args.out or f"{args.method}-{args.arch}-{args.data}.json")
    provenance = {"data": args.data, "image_size": args.image_size, "arch": args.arch, "seed": args.seed,
                  "test_accuracy": acc, "manifest": manifest_path(out).name}
    dataio.save_posterior(out, post, provenance)
    print(f"test accuracy: {acc:.4f}")
    if isinstance(post, bayes.HmcEnsemble):
        print(f"accept rate: {post.accept_rate:.3f} ({len(post.samples)} samples kept)")
    print(f"posterior written to {out}")
    manifest.config["train_config"] = asdict(cfg)
    manifest.config["test_accuracy"] = acc
    return [str(out), str(out.with_suffix(".bin"))]


# --- estimation helpers --------------------------------------------------------------

def _floats(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None
    if not values:
        raise UsageError("empty grid")
    return values


def parse_mask(text: Optional[str], input_shape: tuple) -> Optional[tuple]:
    """``all`` (default), comma-separated flat indices, or ``patch:ROW,COL,H,W`` on the image grid."""
    if text is None or text == "all":
        return None
    if text.startswith("patch:"):
        r, c, h, w = (int(v) for v in text[6:].split(","))
        if len(input_shape) == 3:
            width = input_shape[2]
        else:
            width = math.isqrt(input_shape[0])
            if width * width != input_shape[0]:
                raise UsageError("patch masks need square image inputs")
        return tuple((r + i) * width + (c + j) for i in range(h) for j in range(w))
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"cannot parse mask {text!r}") from None


def _load_input(args, post):
    if (args.input_index is None) == (args.input_file is None):
        raise UsageError("give exactly one of --input-index and --input-file")
    if args.input_file is not None:
        path = Path(args.input_file)
        x = np.load(path) if path.suffix == ".npy" else np.array(json.loads(path.read_text()), dtype=float)
        return np.asarray(x, dtype=np.float64).reshape(post.arch.input_shape), None
    prov = getattr(post, "provenance", {}) or {}
    data = args.data or prov.get("data")
    if data is None:
        raise UsageError("--input-index needs --data (the posterior does not record its dataset)")
    image_size = args.image_size or prov.get("image_size", 28)
    ds = load_data(data, "test", image_size=image_size, seed=prov.get("seed", 0),
                   images=len(post.arch.input_shape) == 3)
    if not 0 <= args.input_index < len(ds):
        raise UsageError(f"--input-index must lie in [0, {len(ds)})")
    return ds.inputs[args.input_index].reshape(post.arch.input_shape), int(ds.labels[args.input_index])


def _verify_method(args, name: str):
    if name == "reach":
        return Reachability(args.tolerance, args.max_splits)
    if name == "fgsm":
        return Fgsm()
    if name == "pgd":
        return Pgd(steps=args.pgd_steps, step_size=args.pgd_step_size)
    raise UsageError(f"unknown method {name!r}")


def _property(args, delta: Optional[float]):
    if args.property == "phi1":
        if delta is None:
            raise UsageError("--property phi1 requires --delta")
        return Phi1(delta, args.norm)
    return Phi2(use_argmax=args.argmax)


def _est_config(args) -> EstimationConfig:
    return EstimationConfig(args.theta, args.gamma, args.alpha, args.eta, args.max_samples, args.seed)


def _load_posterior(path):
    post = dataio.load_posterior(path)
    header = json.loads(Path(path).read_text(encoding="utf-8"))
    post.provenance = header.get("provenance", {})
    return post


def _robustness_row(res) -> tuple:
    return (res.n - res.k) / res.n, res.n, 1.0 - res.ci.b, 1.0 - res.ci.a


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Optional[str], header, rows) -> Optional[Path]:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    if path is None or path == "-":
        sys.stdout.write(buf.getvalue())
        return None
    out = Path(path)
    out.write_text(buf.getvalue(), encoding="utf-8")
    return out


# --- estimate / sweeps ------------------------------------------------------------------

def cmd_estimate(args, manifest: RunManifest) -> list:
    post = _load_posterior(args.posterior)
    x_star, label = _load_input(args, post)
    region = Region(x_star, args.epsilon, parse_mask(args.mask, post.arch.input_shape))
    query = RobustnessQuery(x_star, region, _property(args, args.delta), _verify_method(args, args.method))
    cfg = _est_config(args)
    res = estimate.estimate_robustness(query, post, cfg, keep_log=args.log, workers=estimate.default_workers())
    out = Path(args.out or "result.json")
    doc = res.to_dict(include_witnesses=not args.no_witnesses)
    doc["robustness"] = (res.n - res.k) / res.n
    doc["query"] = {"property": args.property, "delta": args.delta, "norm": args.norm,
                    "epsilon": args.epsilon, "mask": list(region.feature_mask) if region.feature_mask else None,
                    "method": args.method, "input_index": args.input_index, "input_label": label,
                    "posterior": str(args.posterior)}
    doc["manifest"] = manifest_path(out).name
    out.write_text(json.dumps(dataio.json_safe(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"p_hat: {res.p_hat:.6f}  (robustness {doc['robustness']:.6f})")
    print(f"n: {res.n}  k: {res.k}  terminated by {res.terminating_bound}")
    print(f"CI ({res.ci.level:.0%}): [{res.ci.a:.6f}, {res.ci.b:.6f}]")
    if res.robust_verdict is not None:
        word = "robust" if args.property == "phi1" else "safe"
        print(f"verdict: {'' if res.robust_verdict else 'not '}{word} at eta={args.eta}")
    manifest.schemas["result_json"] = estimate.SCHEMA_VERSION
    return [str(out)]


class _SharedReachTrials:
    """Likelihood-property trials whose reachability results are shared across deltas.

    The logit-difference extremes depend only on the sampled network and the
    region, so for a fixed seed and epsilon they are computed once per sample
    index and only the delta comparison is redone per cell.  Verdicts match
    the per-cell checker, including the retry with doubled split budget.
    """

    def __init__(self, x_star, region, method, norm, posterior, seed):
        self.x_star, self.region, self.method, self.norm = x_star, region, method, norm
        self.posterior, self.seed = posterior, seed
        self.cache = {}

    def _extremes(self, index, scale):
        rng = np.random.default_rng([self.seed, index])
        net = nn.Network(self.posterior.arch, bayes.sample_weights(self.posterior, rng))
        p_ref = nn.softmax(nn.forward(net, self.x_star))
        r = reach_extrema(net, self.region, LogitDiff(0, 1), self.method.tolerance,
                          self.method.max_splits * scale)
        cands = np.array([r.argmin, r.argmax])
        disc = _discrepancy(p_ref, nn.predict_proba(net, cands), self.norm)
        i = int(np.argmax(disc))
        outer = None
        if not r.tolerance_met:
            ends = nn.softmax(np.array([[r.lower, 0.0], [r.upper, 0.0]]))
            outer = float(_discrepancy(p_ref, ends, self.norm).max())
        return float(disc[i]), cands[i], outer

    def _verdict(self, entry, delta):
        disc, witness, outer = entry
        if disc > delta:
            return VerdictSample(True, witness)
        return VerdictSample(False, None, inconclusive=outer is not None and outer > delta)

    def for_delta(self, delta: float):
        def trial(index):
            if index not in self.cache:
                self.cache[index] = [self._extremes(index, 1), None]
            first, second = self.cache[index]
            verdict = self._verdict(first, delta)
            if verdict.inconclusive:
                if second is None:
                    second = self.cache[index][1] = self._extremes(index, 2)
                verdict = self._verdict(second, delta)
            return verdict
        return trial


def _sweep_cells(args, post, x_star, mask, eps, deltas):
    cfg = _est_config(args)
    method = _verify_method(args, args.method)
    region = Region(x_star, eps, mask)
    if args.property == "phi1" and args.method == "reach" and post.arch.num_classes == 2:
        shared = _SharedReachTrials(x_star, region, method, args.norm, post, cfg.seed)
        for delta in deltas:
            yield delta, estimate.sequential_estimate(shared.for_delta(delta), cfg)
        return
    for delta in deltas:
        query = RobustnessQuery(x_star, region, _property(args, delta), method)
        yield delta, estimate.estimate_robustness(query, post, cfg, workers=estimate.default_workers())


def cmd_sweep(args, manifest: RunManifest) -> list:
    post = _load_posterior(args.posterior)
    x_star, _ = _load_input(args, post)
    mask = parse_mask(args.mask, post.arch.input_shape)
    eps_grid = _floats(args.eps_grid)
    if args.property == "phi1":
        if args.delta_grid is None:
            raise UsageError("--property phi1 requires --delta-grid")
        deltas = _floats(args.delta_grid)
    else:
        deltas = _floats(args.delta_grid) if args.delta_grid else [None]
    rows = []
    for eps in eps_grid:
        for delta, res in _sweep_cells(args, post, x_star, mask, eps, deltas):
            p, n, a, b = _robustness_row(res)
            rows.append((eps, "" if delta is None else delta, p, n, a, b))
            log.info("eps=%g delta=%s robustness=%.4f n=%d", eps, delta, p, n)
    out = _write_csv(args.out, SWEEP_COLUMNS, rows)
    manifest.schemas["sweep_csv"] = CSV_SCHEMA
    return [str(out)] if out else []


def cmd_attack_sweep(args, manifest: RunManifest) -> list:
    post = _load_posterior(args.posterior)
    eps_grid = _floats(args.eps_grid)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods or any(m not in ("fgsm", "pgd") for m in methods):
        raise UsageError("--methods takes a comma-separated subset of fgsm,pgd")
    ids = [int(v) for v in args.image_ids.split(",")] if args.image_ids else list(range(args.num_images))
    mask = parse_mask(args.mask, post.arch.input_shape)
    rows = []
    for image_id in ids:
        args.input_index, args.input_file = image_id, None
        x_star, _ = _load_input(args, post)
        for eps in eps_grid:
            region = Region(x_star, eps, mask)
            for m in methods:
                query = RobustnessQuery(x_star, region, _property(args, args.delta), _verify_method(args, m))
                res = estimate.estimate_robustness(query, post, _est_config(args),
                                                   workers=estimate.default_workers())
                rows.append((image_id, eps, m, (res.n - res.k) / res.n))
    out = _write_csv(args.out, ATTACK_COLUMNS, rows)
    manifest.schemas["attack_csv"] = CSV_SCHEMA
    return [str(out)] if out else []


def bound_rows(theta: float, gamma: float, alpha: float) -> list:
    """Sample-size requirement against the governing interval endpoint, step 0.01."""
    c_real = estimate.chernoff_bound(theta, gamma)
    c_n = estimate.chernoff_n(theta, gamma)
    rows = []
    for i in range(101):
        e = i / 100
        m = estimate.massart_curve(theta, gamma, alpha, e)
        rows.append((f"{e:.2f}", math.ceil(m), c_n, math.ceil(min(m, c_real))))
    return rows


def cmd_bounds(args, manifest: RunManifest) -> list:
    EstimationConfig(args.theta, args.gamma, args.alpha)  # validates
    out = _write_csv(args.out, BOUNDS_COLUMNS, bound_rows(args.theta, args.gamma, args.alpha))
    manifest.schemas["bounds_csv"] = CSV_SCHEMA
    return [str(out)] if out else []


# --- parser ---------------------------------------------------------------------------

def _stat_flags(p):
    p.add_argument("--theta", type=float, default=0.075)
    p.add_argument("--gamma", type=float, default=0.075)
    p.add_argument("--alpha", type=float, default=0.05)


def _query_flags(p, sweep=False):
    p.add_argument("--posterior", required=True)
    p.add_argument("--input-index", type=int)
    if not sweep:
        p.add_argument("--input-file")
    p.add_argument("--data", choices=["mnist17", "blobs"], help="dataset for --input-index "
                   "(defaults to the one recorded in the posterior)")
    p.add_argument("--image-size", type=int, choices=[28, 14])
    p.add_argument("--property", choices=["phi1", "phi2"], default="phi1")
    p.add_argument("--norm", choices=["l1", "l2", "linf"], default="linf")
    p.add_argument("--argmax", action="store_true", help="phi2: take the argmax class at the worst-case point")
    p.add_argument("--mask", help="free features: 'all', flat indices 'i,j,...', or 'patch:ROW,COL,H,W'")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--max-splits", type=int, default=2000)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--pgd-step-size", type=float)
    _stat_flags(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--max-samples", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnrobust", description="Statistical robustness estimation for BNNs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a posterior and write it to disk")
    p.add_argument("--method", choices=["hmc", "vi", "mcd"], required=True)
    p.add_argument("--arch", choices=["fcn512", "toy", "conv"], default="fcn512")
    p.add_argument("--data", choices=["mnist17", "blobs"], required=True)
    p.add_argument("--image-size", type=int, choices=[28, 14], default=28)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--leapfrog-steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--drop-rate", type=float, default=0.5)
    p.add_argument("--fixed-step", action="store_true", help="hmc: disable burn-in step-size adaptation")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate one robustness probability")
    _query_flags(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--method", choices=["reach", "fgsm", "pgd"], default="reach")
    p.add_argument("--log", action="store_true", help="include the per-sample verdict log")
    p.add_argument("--no-witnesses", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="(epsilon, delta) grid to a heatmap CSV")
    _query_flags(p)
    p.add_argument("--eps-grid", required=True)
    p.add_argument("--delta-grid")
    p.add_argument("--method", choices=["reach", "fgsm", "pgd"], default="reach")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack-sweep", help="attack-strength sweep to a long CSV")
    _query_flags(p, sweep=True)
    p.set_defaults(property="phi2")
    p.add_argument("--delta", type=float)
    p.add_argument("--image-ids")
    p.add_argument("--num-images", type=int, default=50)
    p.add_argument("--eps-grid", required=True)
    p.add_argument("--methods", default="fgsm,pgd")
    p.set_defaults(func=cmd_attack_sweep)

    p = sub.add_parser("bounds", help="sample-size bound curve CSV")
    _stat_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    manifest = _start_manifest(args, argv)
    try:
        artifacts = args.func(args, manifest)
    except UsageError as e:
        parser.error(str(e))
    except (estimate.EstimationError, bayes.TrainingError, dataio.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if artifacts:
        manifest.artifacts = artifacts
        _finish_manifest(manifest, Path(artifacts[0]), t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
