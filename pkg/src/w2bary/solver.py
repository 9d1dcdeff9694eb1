"""Barycenter training: 2N convex potentials fitted by stochastic gradients.

For every input measure n we keep a forward potential ``psi_n`` (its
gradient pushes P_n toward the barycenter) and a conjugate potential
``phi_n`` (its gradient should invert that map). One iteration minimizes

    multicorr + lam * cycle + tau * congruence

on fresh batches and then clamps the nonnegative weights of every network.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Bound, Tensor
from .distributions import GaussianSampler, Sampler, StandardGaussian, estimate_moments
from .groundtruth import fixed_point_barycenter
from .icnn import DenseICNNConfig, PotentialNetwork, pretrain
from .optim import Adam

log = logging.getLogger(__name__)

PHAT_MODES = ("standard_normal", "gaussian_barycenter")


@dataclass
class TrainConfig:
    tau: float = 5.0
    lam: float = 10.0
    gamma: float = 0.2
    batch: int = 1024
    lr: float = 1e-3
    iterations: int = 50_000
    pretrain_iters: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 256
    seed: int = 0
    phat_mode: str = "gaussian_barycenter"
    hidden_scale: float = 1.0
    skip_rank: int = 2
    log_every: int = 50
    phat_moment_samples: int = 10_000

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.batch < 1 or self.iterations < 0 or self.pretrain_iters < 0:
            raise ValueError("batch must be positive and iteration counts nonnegative")
        if self.phat_mode not in PHAT_MODES:
            raise ValueError(f"phat_mode must be one of {PHAT_MODES}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced CPU budget: 8000 iterations, K=256, halved hidden layers."""
        base = dict(iterations=8000, batch=256, hidden_scale=0.5)
        base.update(overrides)
        return cls(**base)


def check_weights(weights, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or (n is not None and w.size != n):
        raise ValueError(f"need {n} weights, got {w.size}")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must be positive and sum to 1 (sum={w.sum()!r})")
    return w


@dataclass
class BarycenterModel:
    potentials: list[PotentialNetwork]
    conjugates: list[PotentialNetwork]
    weights: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)
    samplers: list[Sampler] | None = None
    phat: Sampler | None = None
    history: dict = field(default_factory=lambda: {k: [] for k in ("multicorr", "cycle", "congruence", "total")})
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.weights = check_weights(self.weights, len(self.potentials))
        if len(self.conjugates) != len(self.potentials):
            raise ValueError("need one conjugate potential per forward potential")
        dims = {net.input_dim for net in self.potentials + self.conjugates}
        if len(dims) != 1:
            raise ValueError(f"networks disagree on dimension: {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.potentials)

    @property
    def dim(self) -> int:
        return self.potentials[0].input_dim

    def networks(self) -> list[PotentialNetwork]:
        return self.potentials + self.conjugates

    # ------------------------------------------------------------- persistence

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for kind, nets in (("potential", self.potentials), ("conjugate", self.conjugates)):
            for i, net in enumerate(nets):
                name = f"{kind}_{i}.json"
                net.save(d / name)
                files.append({"role": kind, "index": i, "file": name})
        manifest = {
            "format_version": 1,
            "weights": self.weights.tolist(),
            "config": asdict(self.config),
            "networks": files,
        }
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "BarycenterModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        pots, conjs = {}, {}
        for entry in manifest["networks"]:
            target = pots if entry["role"] == "potential" else conjs
            target[entry["index"]] = PotentialNetwork.load(d / entry["file"])
        n = len(pots)
        return cls(
            [pots[i] for i in range(n)],
            [conjs[i] for i in range(n)],
            np.array(manifest["weights"]),
            TrainConfig(**manifest["config"]),
        )


def identity_model(dim: int, weights, hidden=(4,), seed: int = 0) -> BarycenterModel:
    """Model whose potentials are exactly ``|x|^2/2`` (used by tests and checks).

    Every hidden unit is switched off by zero output weights; the global
    quadratic skip with rank ``dim`` carries the identity Hessian.
    """
    weights = np.asarray(weights, dtype=np.float64)
    cfg = DenseICNNConfig(dim, tuple(hidden), skip_rank=dim)
    nets = []
    for i in range(2 * weights.size):
        net = PotentialNetwork.init(cfg, seed + i)
        net.params["w_out"][...] = 0.0
        net.params["U_out"][...] = np.eye(dim)
        net.params["v_out"][...] = 0.0
        net.params["c_out"][...] = 0.0
        nets.append(net)
    return BarycenterModel(nets[: weights.size], nets[weights.size :], weights)


# ------------------------------------------------------------- loss graphs


@dataclass
class Terms:
    multicorr: Tensor
    cycle: Tensor
    congruence: Tensor
    pushforwards: list[np.ndarray]
    multicorr_rows: list[np.ndarray]

    def total(self, lam: float, tau: float) -> Tensor:
        return (self.multicorr + self.cycle * lam + self.congruence * tau).named("total")


def _check_batches(model: BarycenterModel, batches) -> list[np.ndarray]:
    if len(batches) != model.n:
        raise ValueError(f"need {model.n} batches, got {len(batches)}")
    out = []
    for X in batches:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != model.dim:
            raise ad.DimensionError(model.dim, X.shape[-1] if X.ndim else 0, "batch")
        out.append(X)
    return out


def _raise_nonfinite(name: str, parts: Sequence[np.ndarray]):
    for n, arr in enumerate(parts):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise ad.NonFiniteError(f"{name}: non-finite term for distribution {n}, row {row}", name, (n, row))


def _transport_terms(model, bf, bc, batches):
    """Per-distribution multicorr and cycle tensors sharing one forward pass."""
    corr, cyc, pushes, rows = [], [], [], []
    for n, X in enumerate(batches):
        K = X.shape[0]
        _, Y = ad.input_gradient(model.potentials[n], bf[n], ad.constant(X).named(f"X{n}"))
        Y.named(f"push{n}")
        val_c, back = ad.input_gradient(model.conjugates[n], bc[n], Y)
        per_row = ad.tsum(ad.mul(X, Y), 1) - val_c
        rows.append(per_row.data)
        corr.append(per_row.sum() * (model.weights[n] / K))
        cyc.append(ad.tsum(ad.square(back - X)) * (model.weights[n] / K))
        pushes.append(Y.data)
    _raise_nonfinite("multicorr", rows)
    return corr, cyc, pushes, rows


def _congruence_term(model, bc, pushes: Sequence[np.ndarray], y0: np.ndarray, gamma: float) -> Tensor:
    K = y0.shape[0]
    blocks = [y0] + [np.asarray(p) for p in pushes]
    row_w = [np.full(b.shape[0], gamma / K) for b in blocks[:1]]
    row_w += [np.full(b.shape[0], a * (1.0 - gamma) / K) for a, b in zip(model.weights, blocks[1:])]
    Y = np.concatenate(blocks, axis=0)
    row_w = np.concatenate(row_w)
    acc = None
    for a, net, b in zip(model.weights, model.conjugates, bc):
        term = net.build(b, ad.constant(Y)) * a
        acc = term if acc is None else acc + term
    gap = acc - 0.5 * np.sum(Y * Y, axis=1)
    _raise_nonfinite("congruence", [gap.data])
    return ad.tsum(ad.mul(ad.relu(gap), row_w)).named("congruence")


def build_terms(model: BarycenterModel, batches, y0: np.ndarray, gamma: float, bf=None, bc=None, phat_pushes=None) -> Terms:
    """Loss graph for one iteration.

    The pushforward batches enter the congruence term as samples of the
    regularisation measure, so no gradient flows through them. Passing
    ``phat_pushes`` substitutes a fixed set of such samples.
    """
    batches = _check_batches(model, batches)
    bf = bf or [net.bind(False) for net in model.potentials]
    bc = bc or [net.bind(False) for net in model.conjugates]
    corr, cyc, pushes, rows = _transport_terms(model, bf, bc, batches)
    cong = _congruence_term(model, bc, pushes if phat_pushes is None else phat_pushes, y0, gamma)
    mc = corr[0]
    cy = cyc[0]
    for c, r in zip(corr[1:], cyc[1:]):
        mc = mc + c
        cy = cy + r
    return Terms(mc.named("multicorr"), cy.named("cycle"), cong, pushes, rows)


def multicorr_loss(model: BarycenterModel, batches) -> float:
    batches = _check_batches(model, batches)
    bf = [net.bind(False) for net in model.potentials]
    bc = [net.bind(False) for net in model.conjugates]
    corr, _, _, _ = _transport_terms(model, bf, bc, batches)
    return float(sum(c.data for c in corr))


def cycle_loss(model: BarycenterModel, batches) -> float:
    batches = _check_batches(model, batches)
    bf = [net.bind(False) for net in model.potentials]
    bc = [net.bind(False) for net in model.conjugates]
    _, cyc, _, _ = _transport_terms(model, bf, bc, batches)
    val = float(sum(c.data for c in cyc))
    if not np.isfinite(val):
        raise ad.NonFiniteError("cycle loss is not finite", "cycle")
    return val


def congruence_loss(model: BarycenterModel, pushforwards, phat_batch, gamma: float) -> float:
    bc = [net.bind(False) for net in model.conjugates]
    return float(_congruence_term(model, bc, pushforwards, np.asarray(phat_batch, dtype=np.float64), gamma).data)


def draw_batches(samplers: Sequence[Sampler], rng, k: int) -> list[np.ndarray]:
    return [s.draw(rng, k) for s in samplers]


def total_loss(model: BarycenterModel, config: TrainConfig, rng, batches=None, y0=None):
    """Fresh-batch estimate of the full objective and its three parts."""
    if batches is None:
        batches = draw_batches(model.samplers, rng, config.batch)
    if y0 is None:
        y0 = model.phat.draw(rng, config.batch)
    t = build_terms(model, batches, y0, config.gamma)
    parts = {
        "multicorr": float(t.multicorr.data),
        "cycle": float(t.cycle.data),
        "congruence": float(t.congruence.data),
    }
    total = parts["multicorr"] + config.lam * parts["cycle"] + config.tau * parts["congruence"]
    return total, parts


# ---------------------------------------------------------------- training


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, model, iteration):
        self.model = model
        self.iteration = iteration
        super().__init__(message)


def initial_phat(samplers: Sequence[Sampler], weights, mode: str, rng, k: int) -> Sampler:
    dim = samplers[0].dim
    if mode == "standard_normal":
        return StandardGaussian(dim)
    moments = [s.moments if s.moments is not None else estimate_moments(s, k, rng) for s in samplers]
    bar = fixed_point_barycenter(moments, weights)
    return GaussianSampler(bar.mean, bar.cov)


def new_model(samplers: Sequence[Sampler], weights, config: TrainConfig) -> BarycenterModel:
    dims = {s.dim for s in samplers}
    if len(dims) != 1:
        raise ValueError(f"samplers disagree on dimension: {sorted(dims)}")
    dim = dims.pop()
    weights = check_weights(weights, len(samplers))
    cfg = DenseICNNConfig.for_dim(dim, config.hidden_scale, config.skip_rank)
    n = len(samplers)
    seeds = np.random.SeedSequence(config.seed).spawn(2 * n)
    nets = [PotentialNetwork.init(cfg, int(s.generate_state(1)[0])) for s in seeds]
    return BarycenterModel(nets[:n], nets[n:], weights, config, list(samplers))


def _share_storage(nets: Sequence[PotentialNetwork]) -> np.ndarray:
    """Re-point every network's parameters into one contiguous vector."""
    flat = np.concatenate([net.params.values for net in nets])
    pos = 0
    for net in nets:
        size = net.params.size
        net.params.values = flat[pos : pos + size]
        pos += size
    return flat


def train(
    samplers: Sequence[Sampler],
    weights,
    config: TrainConfig,
    callback: Callable[[int, BarycenterModel], None] | None = None,
    model: BarycenterModel | None = None,
) -> BarycenterModel:
    """Fit barycenter potentials for ``samplers`` with mixture weights ``weights``."""
    if model is None:
        model = new_model(samplers, weights, config)
    model.samplers = list(samplers)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    if config.pretrain_iters > 0:
        for i, net in enumerate(model.networks()):
            loss = pretrain(
                net,
                config.pretrain_iters,
                config.pretrain_lr,
                config.pretrain_batch,
                seed=int(rng.integers(2**31)),
            )
            log.debug("pretrained network %d: loss %.3e", i, loss)

    model.phat = initial_phat(model.samplers, model.weights, config.phat_mode, rng, config.phat_moment_samples)
    nets = model.networks()
    flat = _share_storage(nets)
    mask = np.concatenate([net.params.nonnegative_mask() for net in nets])
    opt = Adam(flat.size, lr=config.lr)
    last_good = flat.copy()

    for it in range(config.iterations + 1):
        batches = draw_batches(model.samplers, rng, config.batch)
        y0 = model.phat.draw(rng, config.batch)
        bf = [net.bind() for net in model.potentials]
        bc = [net.bind() for net in model.conjugates]
        try:
            terms = build_terms(model, batches, y0, config.gamma, bf, bc)
            total = terms.total(config.lam, config.tau)
            g = ad.grad_params(total, *bf, *bc) if it < config.iterations else None
        except ad.NonFiniteError as exc:
            flat[:] = last_good
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {exc}", model, it) from exc
        comps = {
            "multicorr": float(terms.multicorr.data),
            "cycle": float(terms.cycle.data),
            "congruence": float(terms.congruence.data),
            "total": float(total.data),
        }
        for k, v in comps.items():
            model.history[k].append(v)
        if it % config.log_every == 0 or it == config.iterations:
            model.log.append({"iteration": it, **comps})
            if callback is not None:
                callback(it, model)
        if g is None:
            break
        last_good[:] = flat
        opt.step(flat, g)
        np.maximum(flat, 0.0, out=flat, where=mask)
    return model


def push_barycenter_samples(model: BarycenterModel, n: int, k: int, rng) -> np.ndarray:
    """Draw ``k`` points from input ``n`` (0-based) and push them forward."""
    if not 0 <= n < model.n:
        raise IndexError(f"distribution index {n} out of range 0..{model.n - 1}")
    X = model.samplers[n].draw(rng, k)
    return model.potentials[n].push(X)


def pooled_pushforward(model: BarycenterModel, k: int, rng) -> np.ndarray:
    """Sample of the mixture sum_n alpha_n (grad psi_n # P_n), ``k`` rows."""
    counts = rng.multinomial(k, model.weights)
    parts = [push_barycenter_samples(model, n, int(c), rng) for n, c in enumerate(counts) if c > 0]
    return np.concatenate(parts, axis=0)


def write_training_log(model: BarycenterModel, path) -> None:
    Path(path).write_text(json.dumps(model.log, indent=1))
