"""Unexplained-variance metrics for learned transport maps and barycenters."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .distributions import moments_of
from .groundtruth import GaussianMoments, LinearMap, bures_w2_sq

REPORT_COLUMNS = ("row", "weight", "l2_uvp", "bw2_uvp", "cycle", "congruence", "samples")


def variance_of(moments: GaussianMoments) -> float:
    """Total variance: the trace of the covariance."""
    return float(np.trace(moments.cov))


def l2_uvp(
    map_learned: Callable[[np.ndarray], np.ndarray],
    map_true: LinearMap,
    sampler,
    var_bar: float,
    k: int = 100_000,
    rng: np.random.Generator | None = None,
    x: np.ndarray | None = None,
) -> float:
    """100 * E_x |learned(x) - true(x)|^2 / var_bar, in percent.

    Pass ``x`` to evaluate on a fixed sample instead of drawing ``k`` points.
    """
    if var_bar <= 0:
        raise ValueError("var_bar must be positive")
    if x is None:
        if k < 1000:
            raise ValueError("use at least 1000 samples")
        x = sampler.draw(rng if rng is not None else np.random.default_rng(0), k)
    diff = map_learned(x) - map_true(x)
    return float(100.0 * np.mean(np.sum(diff * diff, axis=1)) / var_bar)


def bw2_uvp(estimate, true_bar: GaussianMoments, var_bar: float | None = None) -> float:
    """100 * BW2^2(estimate, true) / (var_bar / 2).

    ``estimate`` is either moments or a sample matrix (moments estimated).
    """
    if not isinstance(estimate, GaussianMoments):
        estimate = np.asarray(estimate, dtype=np.float64)
        if estimate.shape[0] < 10_000:
            raise ValueError("estimate moments from at least 10^4 samples")
        estimate = moments_of(estimate)
    if var_bar is None:
        var_bar = variance_of(true_bar)
    return float(100.0 * bures_w2_sq(estimate, true_bar) / (0.5 * var_bar))


def congruence_metric(model, samples: np.ndarray, var_bar: float) -> float:
    """100 * E_y |sum_n alpha_n grad conj_n(y) - y|^2 / var_bar over ``samples``.

    The conjugate potentials are the ones the congruence condition constrains;
    their gradients map the barycenter back onto each input.
    """
    y = np.asarray(samples, dtype=np.float64)
    avg = sum(a * net.push(y) for a, net in zip(model.weights, model.conjugates))
    d = avg - y
    return float(100.0 * np.mean(np.sum(d * d, axis=1)) / var_bar)


def cycle_metric(model, n: int, k: int = 100_000, rng=None, var_samples: int = 10_000) -> float:
    """100 * E |grad phi_n(grad psi_n(x)) - x|^2 / Var(P_n) for input ``n``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sampler = model.samplers[n]
    var_n = float(np.trace(moments_of(sampler.draw(rng, var_samples)).cov))
    x = sampler.draw(rng, k)
    back = model.conjugates[n].push(model.potentials[n].push(x))
    d = back - x
    return float(100.0 * np.mean(np.sum(d * d, axis=1)) / var_n)


@dataclass
class MetricReport:
    weights: list[float]
    l2_uvp: list[float] | None = None
    bw2_uvp: list[float] | None = None
    bw2_uvp_pooled: float | None = None
    congruence: float | None = None
    cycle: list[float] | None = None
    samples: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def l2_uvp_weighted(self) -> float | None:
        if self.l2_uvp is None:
            return None
        return float(np.dot(self.weights, self.l2_uvp))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l2_uvp_weighted"] = self.l2_uvp_weighted
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per distribution, then a ``summary`` row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)

        def pick(values, i):
            return "" if values is None else repr(float(values[i]))

        for i, a in enumerate(self.weights):
            w.writerow([i, repr(float(a)), pick(self.l2_uvp, i), pick(self.bw2_uvp, i), pick(self.cycle, i), "", self.samples])
        w.writerow(
            [
                "summary",
                repr(float(np.sum(self.weights))),
                "" if self.l2_uvp is None else repr(self.l2_uvp_weighted),
                "" if self.bw2_uvp_pooled is None else repr(float(self.bw2_uvp_pooled)),
                "" if self.cycle is None else repr(float(max(self.cycle))),
                "" if self.congruence is None else repr(float(self.congruence)),
                self.samples,
            ]
        )
        return buf.getvalue()
