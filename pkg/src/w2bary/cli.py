"""Command-line experiments: location-scatter, posterior, palette, mixture2d."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import distributions as dist
from . import groundtruth as gt
from . import metrics
from .solver import BarycenterModel, TrainConfig, check_weights, pooled_pushforward, train, write_training_log

log = logging.getLogger("w2bary")

EXPERIMENTS = ("location_scatter", "posterior", "palette", "mixture2d")


class ExperimentError(RuntimeError):
    pass


def resolve_weights(mode, n: int) -> np.ndarray:
    """``paper_4``, ``triangular``, ``uniform`` or an explicit list."""
    if isinstance(mode, str):
        if mode == "paper_4":
            if n != 4:
                raise ValueError("paper_4 weights need N=4")
            w = np.array([0.1, 0.2, 0.3, 0.4])
        elif mode in ("triangular", "triangular_N"):
            w = 2.0 * np.arange(1, n + 1) / (n * (n + 1))
        elif mode == "uniform":
            w = np.full(n, 1.0 / n)
        else:
            w = np.array([float(v) for v in mode.split(",")])
    else:
        w = np.asarray(mode, dtype=np.float64)
    return check_weights(w, n)


@dataclass
class ExperimentConfig:
    experiment: str = "location_scatter"
    dim: int = 2
    n: int = 4
    base: str = "gaussian"
    weights: object = "paper_4"
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    inputs: list[str] = field(default_factory=list)
    reference: str | None = None
    out: str = "runs/out"
    seed: int = 0
    eval_samples: int = 100_000
    mixtures: list[dict] | None = None
    # None: standardize file-based data (posterior, palette) only
    standardize: bool | None = None

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.experiment = self.experiment.replace("-", "_")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.weights, np.ndarray):
            d["weights"] = self.weights.tolist()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if "config" in doc and "experiment" not in doc:
            doc = doc["config"]  # a run manifest
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class ExperimentResult:
    report: metrics.MetricReport
    model: BarycenterModel
    out: Path
    extras: dict = field(default_factory=dict)


# ------------------------------------------------------------------- output


def write_image(path, width: int, height: int, rows) -> None:
    """Binary P6 with ``floor(v * 255 + 1/2)`` clamped to [0, 255]."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != (width * height, 3):
        raise ValueError(f"need {width * height} RGB rows, got shape {rows.shape}")
    data = np.clip(np.floor(rows * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{width} {height}\n255\n".encode() + data.tobytes())


def _write_csv(path, X, header) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.asarray(X):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def git_blob_hash(path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _finish(cfg: ExperimentConfig, model: BarycenterModel, report: metrics.MetricReport, extras=None) -> ExperimentResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list(cfg.inputs) + ([cfg.reference] if cfg.reference else [])
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "input_hashes": {str(p): git_blob_hash(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    write_training_log(model, out / "training_log.json")
    model.save(out / "checkpoints")
    st = (extras or {}).get("standardizer")
    if st is not None:
        (out / "checkpoints" / "standardization.json").write_text(json.dumps(st.to_dict(), indent=2))
    return ExperimentResult(report, model, out, extras or {})


def _standardize(cfg: ExperimentConfig, samplers, weights):
    """Train on shifted and rescaled copies when requested.

    Returns ``(samplers, standardizer or None, push)``.

    ``push(model, n, x)`` applies the learned map for input ``n`` in the
    original coordinates.
    """
    use = cfg.standardize if cfg.standardize is not None else cfg.experiment in ("posterior", "palette")
    if not use:
        return list(samplers), None, lambda model, n, x: model.potentials[n].push(x)
    st = dist.Standardizer.fit(samplers, weights, rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 3])))

    def push(model, n, x):
        return st.from_std(model.potentials[n].push(st.to_std(x)))

    return [st.wrap(s) for s in samplers], st, push


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    # the experiment seed drives training too; keep the manifest truthful
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg.train


# -------------------------------------------------------------- experiments


def run_location_scatter(cfg: ExperimentConfig, callback=None) -> ExperimentResult:
    """Train on a location-scatter family and score against the exact solution.

    ``callback(iteration, model, problem)`` is invoked at every logged
    iteration, where ``problem`` holds the family, barycenter and maps.
    """
    weights = resolve_weights(cfg.weights, cfg.n)
    family = dist.make_ls_family(cfg.dim, cfg.n, cfg.base, cfg.seed)
    bar, maps = gt.ls_ground_truth(family, weights)
    var_bar = metrics.variance_of(bar)
    problem = {"family": family, "barycenter": bar, "maps": maps, "weights": weights}
    hook = None if callback is None else (lambda it, m: callback(it, m, problem))
    model = train(family, weights, _train_config(cfg), callback=hook)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    l2, bw2, cyc = [], [], []
    pushed = []
    for n, (spec, T) in enumerate(zip(family, maps)):
        x = spec.draw(rng, cfg.eval_samples)
        y = model.potentials[n].push(x)
        pushed.append(y)
        l2.append(metrics.l2_uvp(model.potentials[n].push, T, spec, var_bar, x=x))
        bw2.append(metrics.bw2_uvp(y, bar, var_bar))
        cyc.append(metrics.cycle_metric(model, n, cfg.eval_samples, rng))
    pool = pooled_pushforward(model, cfg.eval_samples, rng)
    report = metrics.MetricReport(
        weights=weights.tolist(),
        l2_uvp=l2,
        bw2_uvp=bw2,
        bw2_uvp_pooled=metrics.bw2_uvp(pool, bar, var_bar),
        congruence=metrics.congruence_metric(model, pool, var_bar),
        cycle=cyc,
        samples=cfg.eval_samples,
        extra={"var_bar": var_bar, "barycenter": bar.to_dict()},
    )
    result = _finish(cfg, model, report)
    if cfg.dim == 2:
        for n, (spec, y) in enumerate(zip(family, pushed)):
            _write_csv(result.out / f"input_{n}.csv", spec.draw(rng, 2000), ("x", "y"))
            _write_csv(result.out / f"pushforward_{n}.csv", y[:2000], ("x", "y"))
    result.extras.update(problem)
    return result


def run_posterior(cfg: ExperimentConfig) -> ExperimentResult:
    if not cfg.inputs:
        raise ExperimentError("posterior experiment needs subset sample files in 'inputs'")
    if not cfg.reference:
        raise ExperimentError("posterior experiment needs a full-data 'reference' sample file")
    subsets = [dist.load_empirical(p) for p in cfg.inputs]
    reference = dist.load_empirical(cfg.reference)
    dims = {s.dim for s in subsets} | {reference.dim}
    if len(dims) != 1:
        raise ExperimentError(f"sample files disagree on dimension: {sorted(dims)}")
    weights = resolve_weights(cfg.weights if cfg.weights != "paper_4" else "uniform", len(subsets))
    ref = dist.estimate_moments(reference)
    var_bar = metrics.variance_of(ref)
    train_on, st, push = _standardize(cfg, subsets, weights)
    model = train(train_on, weights, _train_config(cfg))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    per_n = []
    for n, s in enumerate(subsets):
        y = push(model, n, s.draw(rng, cfg.eval_samples))
        per_n.append(metrics.bw2_uvp(y, ref, var_bar))
    # pooled samples and the sanity metrics live in training coordinates
    pool = pooled_pushforward(model, cfg.eval_samples, rng)
    unit = 1.0 if st is None else st.scale
    report = metrics.MetricReport(
        weights=weights.tolist(),
        bw2_uvp=per_n,
        bw2_uvp_pooled=metrics.bw2_uvp(pool if st is None else st.from_std(pool), ref, var_bar),
        congruence=metrics.congruence_metric(model, pool, var_bar / unit**2),
        cycle=[metrics.cycle_metric(model, n, cfg.eval_samples, rng) for n in range(len(subsets))],
        samples=cfg.eval_samples,
        extra={"var_bar": var_bar, "reference": ref.to_dict(), "standardization": None if st is None else st.to_dict()},
    )
    return _finish(cfg, model, report, {"push": push, "subsets": subsets, "standardizer": st})


def run_palette(cfg: ExperimentConfig) -> ExperimentResult:
    if len(cfg.inputs) < 2:
        raise ExperimentError("palette experiment needs at least two images")
    palettes = [dist.load_palette(p) for p in cfg.inputs]
    weights = resolve_weights("uniform", len(palettes))
    train_on, st, push = _standardize(cfg, palettes, weights)
    model = train(train_on, weights, _train_config(cfg))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    recolored, moments = [], []
    for n, pal in enumerate(palettes):
        y = np.clip(push(model, n, pal.values), 0.0, 1.0)
        width, height = pal.image_shape
        write_image(out / f"recolored_{n}.ppm", width, height, y)
        recolored.append(y)
        moments.append(dist.moments_of(y))
    var_bar = metrics.variance_of(dist.moments_of(np.concatenate(recolored)))
    pairwise = [
        [gt.bures_w2_sq(a, b) / var_bar for b in moments] for a in moments
    ]
    report = metrics.MetricReport(
        weights=weights.tolist(),
        cycle=[metrics.cycle_metric(model, n, cfg.eval_samples, np.random.default_rng(cfg.seed)) for n in range(len(palettes))],
        samples=cfg.eval_samples,
        extra={
            "palette_moments": [m.to_dict() for m in moments],
            "pairwise_bw2_over_var": pairwise,
            "standardization": None if st is None else st.to_dict(),
        },
    )
    return _finish(cfg, model, report, {"recolored": recolored, "palettes": palettes, "standardizer": st})


DEFAULT_MIXTURES = [
    {"means": [[np.cos(t) * 4, np.sin(t) * 4] for t in np.linspace(0, 2 * np.pi, 8, endpoint=False)], "std": 0.5},
    {"means": [[-3.0, -3.0], [3.0, 3.0], [-3.0, 3.0], [3.0, -3.0]], "std": 0.7},
    {"means": [[0.0, 0.0]], "std": 2.0},
]


def run_mixture2d(cfg: ExperimentConfig) -> ExperimentResult:
    if not cfg.mixtures:
        cfg.mixtures = [{"means": np.asarray(m["means"]).tolist(), "std": m["std"]} for m in DEFAULT_MIXTURES[: cfg.n]]
    specs = cfg.mixtures
    samplers = [dist.gaussian_mixture(s["means"], s["std"], s.get("weights")) for s in specs]
    weights = resolve_weights(cfg.weights if cfg.weights != "paper_4" else "uniform", len(samplers))
    model = train(samplers, weights, _train_config(cfg))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    pool = pooled_pushforward(model, cfg.eval_samples, rng)
    var_bar = float(np.trace(np.cov(pool, rowvar=False)))
    report = metrics.MetricReport(
        weights=weights.tolist(),
        congruence=metrics.congruence_metric(model, pool, var_bar),
        cycle=[metrics.cycle_metric(model, n, cfg.eval_samples, rng) for n in range(len(samplers))],
        samples=cfg.eval_samples,
    )
    result = _finish(cfg, model, report)
    for n, s in enumerate(samplers):
        x = s.draw(rng, 2000)
        _write_csv(result.out / f"input_{n}.csv", x, ("x", "y"))
        _write_csv(result.out / f"pushforward_{n}.csv", model.potentials[n].push(x), ("x", "y"))
    return result


RUNNERS = {
    "location_scatter": run_location_scatter,
    "posterior": run_posterior,
    "palette": run_palette,
    "mixture2d": run_mixture2d,
}


def run(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg)


# ------------------------------------------------------------------ selftest


def selftest(stream=None) -> bool:
    """Finite-difference, convexity and closed-form checks; True iff all pass."""
    from . import autodiff as ad
    from .icnn import DenseICNNConfig, PotentialNetwork, convexity_probe
    from .solver import BarycenterModel, build_terms

    stream = stream or sys.stdout
    results = []

    def record(name, ok, detail=""):
        results.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}", file=stream)

    rng = np.random.default_rng(0)
    for dim in (1, 2, 4):
        net = PotentialNetwork.init(DenseICNNConfig(dim, (5, 4), 2), dim)
        x = rng.standard_normal((8, dim))
        g = net.push(x)
        fd = np.zeros_like(x)
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = 1e-5
            fd[:, j] = (net(x + e) - net(x - e)) / 2e-5
        err = float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)))
        record(f"input gradient D={dim}", err < 1e-5, f"max rel err {err:.2e}")

    cfg = DenseICNNConfig(2, (4, 3), 2)
    nets = [PotentialNetwork.init(cfg, 10 + i) for i in range(4)]
    model = BarycenterModel(nets[:2], nets[2:], np.array([0.3, 0.7]))
    batches = [rng.standard_normal((8, 2)) for _ in range(2)]
    y0 = rng.standard_normal((8, 2))

    phat = build_terms(model, batches, y0, 0.2).pushforwards

    def objective(grad=True):
        bf = [n.bind(grad) for n in model.potentials]
        bc = [n.bind(grad) for n in model.conjugates]
        return build_terms(model, batches, y0, 0.2, bf, bc, phat).total(10.0, 5.0), bf, bc

    loss, bf, bc = objective()
    rep = ad.finite_diff_check(
        lambda: float(objective(False)[0].data), [n.params for n in nets], ad.grad_params(loss, *bf, *bc), h=1e-5, tol=1e-4
    )
    record("objective parameter gradient", rep.passed, f"max rel err {rep.max_rel_err:.2e}")

    for seed in range(3):
        net = PotentialNetwork.init(DenseICNNConfig(3, (8, 8), 2), seed)
        gap = convexity_probe(net, 10_000, seed)
        record(f"convexity probe seed {seed}", gap >= -1e-9, f"min gap {gap:.2e}")

    GM = gt.GaussianMoments
    record("bures isotropic", abs(gt.bures_w2_sq(GM([0, 0], np.eye(2)), GM([0, 0], 4 * np.eye(2))) - 1) < 1e-12)
    T = gt.gaussian_ot_map(GM([0, 0], np.diag([1.0, 4.0])), GM([0, 0], np.eye(2)))
    record("gaussian map diagonal", np.allclose(T.A, np.diag([1.0, 0.5]), atol=1e-12))
    R = gt.sqrtm_psd(np.diag([4.0, 9.0]))
    record("sqrtm diagonal", np.allclose(R, np.diag([2.0, 3.0]), atol=1e-12))
    bar = gt.fixed_point_barycenter([GM([0], [[1.0]]), GM([0], [[4.0]])], [0.5, 0.5])
    record("fixed point 1D", abs(np.sqrt(bar.cov[0, 0]) - 1.5) < 1e-8)
    bar = gt.fixed_point_barycenter([GM([0, 0], np.diag([1.0, 4.0])), GM([0, 0], np.diag([4.0, 1.0]))], [0.5, 0.5])
    record("fixed point commuting", np.abs(bar.cov - 2.25 * np.eye(2)).max() < 1e-8)
    return all(results)


# ---------------------------------------------------------------------- CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="w2bary", description="Wasserstein-2 barycenters with convex potentials.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name, help_text, config_required=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=config_required, help="JSON experiment config or run manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--dim", type=int)
        sp.add_argument("--n", type=int)
        sp.add_argument("--base", choices=sorted(dist.BASES))
        sp.add_argument("--weights", help="paper_4, triangular, uniform or comma-separated values")
        sp.add_argument("--inputs", nargs="+")
        sp.add_argument("--reference")
        sp.add_argument("--eval-samples", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--pretrain-iters", type=int)
        sp.add_argument("--hidden-scale", type=float)
        sp.add_argument("--phat-mode", choices=["standard_normal", "gaussian_barycenter"])
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    experiment("location-scatter", "location-scatter family with closed-form ground truth")
    experiment("posterior", "aggregate subset posterior samples (CSV)", config_required=True)
    experiment("palette", "average the colour palettes of PPM images")
    experiment("mixture2d", "2-D Gaussian-mixture demo; writes sample CSVs")
    sub.add_parser("selftest", help="run gradient, convexity and closed-form checks")
    return p


TOP_LEVEL = ("seed", "out", "dim", "n", "base", "weights", "inputs", "reference", "eval_samples")
TRAIN_LEVEL = ("iterations", "batch", "lr", "tau", "lam", "gamma", "pretrain_iters", "hidden_scale", "phat_mode")


def config_from_args(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ExperimentError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
    if "config" in doc and "experiment" not in doc:
        doc = doc["config"]
    cfg = ExperimentConfig.from_dict(dict(doc, experiment=args.command.replace("-", "_")))
    for key in TOP_LEVEL:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    overrides = {k: getattr(args, k) for k in TRAIN_LEVEL if getattr(args, k, None) is not None}
    if overrides:
        cfg.train = dataclasses.replace(cfg.train, **overrides)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "selftest":
        return 0 if selftest() else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = config_from_args(args)
        result = run(cfg)
    except (ExperimentError, FileNotFoundError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"w2bary: error: {exc}", file=sys.stderr)
        return 1
    print(result.report.to_json())
    print(f"outputs written to {result.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
