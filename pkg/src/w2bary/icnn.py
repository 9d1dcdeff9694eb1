"""Dense input-convex potentials with input-quadratic skip connections.

Layer plan for hidden sizes ``h_0..h_{L-1}`` and skip rank ``r``::

    q_l(x)   = 1/2 * sum_r (U_l[j, r] . x)^2 + W_l[j] . x + b_l[j]   (per unit j)
    z_0      = celu(q_0(x))
    z_l      = celu(A_l z_{l-1} + q_l(x))          A_l >= 0
    psi(x)   = w . z_{L-1} + 1/2 ||U_out x||^2 + v . x + c     w >= 0

Each ``q_l`` unit is convex in ``x`` and CELU is convex and nondecreasing,
so nonnegative ``A_l`` and ``w`` keep ``psi`` convex.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Bound, ParamStore, Tensor
from .optim import Adam

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DenseICNNConfig:
    input_dim: int
    hidden_sizes: tuple[int, ...] = (64, 64, 32)
    skip_rank: int = 2
    activation: str = "celu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive integers")
        if self.skip_rank < 1:
            raise ValueError("skip_rank must be >= 1")
        if self.activation != "celu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def for_dim(cls, dim: int, scale: float = 1.0, rank: int = 2) -> "DenseICNNConfig":
        """Sizes ``[max(64,2D), max(64,2D), max(32,D)]`` times ``scale``."""
        sizes = (max(64, 2 * dim), max(64, 2 * dim), max(32, dim))
        return cls(dim, tuple(max(1, int(round(s * scale))) for s in sizes), rank)


def layer_shapes(cfg: DenseICNNConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    D, r = cfg.input_dim, cfg.skip_rank
    shapes = []
    prev = None
    for l, h in enumerate(cfg.hidden_sizes):
        shapes.append((f"U{l}", (h * r, D), False))
        shapes.append((f"W{l}", (h, D), False))
        shapes.append((f"b{l}", (h,), False))
        if prev is not None:
            shapes.append((f"A{l}", (h, prev), True))
        prev = h
    shapes.append(("w_out", (prev, 1), True))
    shapes.append(("U_out", (r, D), False))
    shapes.append(("v_out", (D, 1), False))
    shapes.append(("c_out", (1,), False))
    return shapes


@functools.lru_cache(maxsize=None)
def _rank_sum(units: int, rank: int) -> np.ndarray:
    # halves and sums each unit's block of ``rank`` squared projections
    return np.kron(np.eye(units), np.full((rank, 1), 0.5))


def param_count(cfg: DenseICNNConfig) -> int:
    return sum(int(np.prod(s)) for _, s, _ in layer_shapes(cfg))


class PotentialNetwork:
    """A convex potential ``psi``; :meth:`push` is its gradient map."""

    def __init__(self, config: DenseICNNConfig, params: ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else ParamStore.from_shapes(layer_shapes(config))

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @classmethod
    def init(cls, config: DenseICNNConfig, seed: int) -> "PotentialNetwork":
        net = cls(config)
        rng = np.random.default_rng(seed)
        for slot in net.params.slots:
            fan_in = slot.shape[1] if len(slot.shape) == 2 else config.input_dim
            if slot.name == "w_out":
                fan_in = slot.shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, size=slot.shape)
            net.params[slot.name][...] = np.abs(vals) if slot.nonnegative else vals
        return net

    def build(self, p: Bound, x: Tensor) -> Tensor:
        cfg = self.config
        r = cfg.skip_rank
        K = x.shape[0]
        z = None
        for l, h in enumerate(cfg.hidden_sizes):
            q = ad.square(x @ p[f"U{l}"].T) @ _rank_sum(h, r) + x @ p[f"W{l}"].T + p[f"b{l}"]
            pre = q if z is None else z @ p[f"A{l}"].T + q
            z = ad.celu(pre)
        quad = ad.tsum(ad.square(x @ p["U_out"].T), 1) * 0.5
        out = ad.reshape(z @ p["w_out"] + x @ p["v_out"], (K,)) + quad + p["c_out"]
        return out

    def forward(self, x) -> np.ndarray:
        return ad.eval_scalar(self, self.params, x)

    __call__ = forward

    def push(self, x) -> np.ndarray:
        return ad.grad_input(self, self.params, x)

    def bind(self, requires_grad=True) -> Bound:
        return Bound(self.params, requires_grad)

    def project_convex(self) -> None:
        self.params.project()

    def is_projected(self) -> bool:
        mask = self.params.nonnegative_mask()
        return bool(np.all(self.params.values[mask] >= 0))

    def copy(self) -> "PotentialNetwork":
        return PotentialNetwork(self.config, self.params.copy())

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        bits = np.ascontiguousarray(self.params.values, dtype="<f8").view("<u8")
        return {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config) | {"hidden_sizes": list(self.config.hidden_sizes)},
            "layout": [
                {"name": s.name, "shape": list(s.shape), "start": s.start, "nonnegative": s.nonnegative}
                for s in self.params.slots
            ],
            "params": [f"{b:016x}" for b in bits.tolist()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PotentialNetwork":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        cfg = DenseICNNConfig(**doc["config"])
        net = cls(cfg)
        layout = [(d["name"], tuple(d["shape"]), d["start"], d["nonnegative"]) for d in doc["layout"]]
        expected = [(s.name, s.shape, s.start, s.nonnegative) for s in net.params.slots]
        if layout != expected:
            raise ValueError("checkpoint layout does not match its config")
        bits = np.array([int(h, 16) for h in doc["params"]], dtype="<u8")
        net.params.values[:] = bits.view("<f8")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PotentialNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def project_convex(net: PotentialNetwork) -> None:
    net.project_convex()


def pretrain_loss(net: PotentialNetwork, bound: Bound, x: np.ndarray) -> Tensor:
    xt = ad.variable(x, tag="x")
    val, g = ad.input_gradient(net, bound, xt)
    half_sq = 0.5 * np.sum(x * x, axis=1)
    value_err = ad.square(val - half_sq).mean()
    grad_err = ad.tsum(ad.square(g - x)) * (1.0 / x.shape[0])
    return (value_err + grad_err).named("pretrain_loss")


def pretrain(
    net: PotentialNetwork,
    iters: int = 2000,
    lr: float = 1e-3,
    batch: int = 256,
    seed: int = 0,
    target: str = "quadratic",
) -> float:
    """Fit ``psi(x) ~ ||x||^2/2`` and ``grad psi(x) ~ x`` on N(0, I) batches.

    Returns the loss of the last step taken (the initial loss if ``iters=0``).
    """
    if target != "quadratic":
        raise ValueError(f"unknown pretraining target {target!r}")
    rng = np.random.default_rng(seed)
    opt = Adam(net.params.size, lr=lr)
    D = net.input_dim
    loss_value = None
    for it in range(iters):
        x = rng.standard_normal((batch, D))
        bound = net.bind()
        loss = pretrain_loss(net, bound, x)
        try:
            g = bound.flat_grad(loss)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"pretraining diverged at iteration {it}: {exc}", exc.tag, it) from exc
        loss_value = float(loss.data)
        opt.step(net.params.values, g)
        net.project_convex()
    if loss_value is None:
        x = rng.standard_normal((batch, D))
        loss_value = float(pretrain_loss(net, net.bind(False), x).data)
    return loss_value


def convexity_probe(net, trials: int = 10_000, seed: int = 0, scale: float = 2.0) -> float:
    """Smallest midpoint gap ``psi(x)/2 + psi(y)/2 - psi((x+y)/2)`` over random pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    D = net.input_dim
    x = scale * rng.standard_normal((trials, D))
    y = scale * rng.standard_normal((trials, D))
    gap = 0.5 * net(x) + 0.5 * net(y) - net(0.5 * (x + y))
    return float(np.min(gap))
