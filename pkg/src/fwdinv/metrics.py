"""Earth Mover's Distance, depth-bias regression and position summaries."""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from fractions import Fraction
from math import lcm
from pathlib import Path

import numpy as np
from scipy import stats


@dataclass
class WeightedPointSet:
    positions: np.ndarray
    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.positions.shape[0]:
            raise ValueError("one weight per point is required")
        if self.weights.size == 0:
            raise ValueError("empty point set")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(self.weights > 0):
            raise ValueError("all weights are zero")
        if self.normalized:
            self.weights = self.weights / self.weights.sum()

    def normalize(self) -> "WeightedPointSet":
        return WeightedPointSet(self.positions, self.weights, normalized=True)


@dataclass
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    flow: np.ndarray
    cost: float

    def dense(self, n: int, m: int) -> np.ndarray:
        out = np.zeros((n, m))
        out[self.rows, self.cols] = self.flow
        return out


def _integer_masses(weights: np.ndarray) -> list[int]:
    """Exact integer representation of normalized float weights (floats are dyadic)."""
    ratios = [float(w).as_integer_ratio() for w in weights]
    den = 1
    for _, d in ratios:
        den = lcm(den, d)
    return [n * (den // d) for n, d in ratios]


def _ssp_transport(supply: list[int], demand: list[int], cost: np.ndarray) -> dict:
    """Successive shortest paths with Dijkstra and node potentials.

    ``sum(supply) == sum(demand)``; returns a dict ``{(i, j): flow}`` of
    positive integer flows.
    """
    n, m = cost.shape
    supply = list(supply)
    demand = list(demand)
    flow: dict[tuple[int, int], int] = {}
    pot = np.zeros(n + m)
    c = cost.tolist()
    inf = float("inf")
    while any(s > 0 for s in supply):
        dist = [inf] * (n + m)
        prev = [-1] * (n + m)
        heap = []
        for i in range(n):
            if supply[i] > 0:
                dist[i] = 0.0
                heap.append((0.0, i))
        heapq.heapify(heap)
        done = [False] * (n + m)
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            if u < n:
                for j in range(m):
                    v = n + j
                    nd = d + max(c[u][j] + pot[u] - pot[v], 0.0)
                    if nd < dist[v]:
                        dist[v], prev[v] = nd, u
                        heapq.heappush(heap, (nd, v))
            else:
                j = u - n
                for i in range(n):
                    if flow.get((i, j), 0) > 0:
                        nd = d + max(-c[i][j] + pot[u] - pot[i], 0.0)
                        if nd < dist[i]:
                            dist[i], prev[i] = nd, u
                            heapq.heappush(heap, (nd, i))
        best = -1
        for j in range(m):
            if demand[j] > 0 and dist[n + j] < inf and (best < 0 or dist[n + j] < dist[n + best]):
                best = j
        if best < 0:
            raise RuntimeError("transport problem infeasible")
        # trace the path back and find the bottleneck
        path = []
        v = n + best
        while prev[v] != -1:
            path.append((prev[v], v))
            v = prev[v]
        start = v
        amount = min(supply[start], demand[best])
        for u, v in path:
            if u >= n:  # backward edge sink u -> source v
                amount = min(amount, flow[(v, u - n)])
        for u, v in path:
            if u < n:
                key = (u, v - n)
                flow[key] = flow.get(key, 0) + amount
            else:
                key = (v, u - n)
                flow[key] -= amount
                if flow[key] == 0:
                    del flow[key]
        supply[start] -= amount
        demand[best] -= amount
        finite = np.array([x if x < inf else np.nan for x in dist])
        top = np.nanmax(finite) if np.any(np.isfinite(finite)) else 0.0
        pot += np.where(np.isfinite(finite), finite, top)
    return flow


def emd(a: WeightedPointSet, b: WeightedPointSet) -> tuple[float, TransportPlan]:
    """Exact Earth Mover's Distance under Euclidean ground distance.

    Weights are normalized to unit mass.  Each side's normalized float
    weights are turned into exact integers; supplies are scaled by the other
    side's total so both sides carry the same integer mass, and the
    transport problem is solved exactly by successive shortest paths.
    """
    wa = a.weights / a.weights.sum()
    wb = b.weights / b.weights.sum()
    ia, ib = _integer_masses(wa), _integer_masses(wb)
    ta, tb = sum(ia), sum(ib)
    cost = np.linalg.norm(a.positions[:, None, :] - b.positions[None, :, :], axis=2)
    sa = [x * tb for x in ia]
    sb = [x * ta for x in ib]
    keep_a = [i for i, x in enumerate(sa) if x > 0]
    keep_b = [j for j, x in enumerate(sb) if x > 0]
    flows = _ssp_transport([sa[i] for i in keep_a], [sb[j] for j in keep_b],
                           cost[np.ix_(keep_a, keep_b)])
    total = ta * tb
    keys = sorted(flows)
    rows = np.array([keep_a[i] for i, _ in keys], dtype=np.int64)
    cols = np.array([keep_b[j] for _, j in keys], dtype=np.int64)
    frac = np.array([float(Fraction(flows[k], total)) for k in keys])
    value = float(np.sum(cost[rows, cols] * frac))
    return value, TransportPlan(rows, cols, frac, value)


def emd_singleton(point, b: WeightedPointSet) -> float:
    """EMD between one point of unit mass and a weighted set: ``sum_j w_j |p - p_j|``."""
    w = b.weights / b.weights.sum()
    d = np.linalg.norm(b.positions - np.asarray(point, dtype=float).reshape(1, 3), axis=1)
    return float(np.sum(w * d))


def reconstruction_weights(amplitude, weighting: str = "amplitude") -> np.ndarray:
    """EMD weights from a reconstruction: amplitudes or their squares."""
    amp = np.asarray(amplitude, dtype=float)
    if weighting == "amplitude":
        return amp
    if weighting == "power":
        return amp ** 2
    raise ValueError(f"unknown weighting {weighting!r}")


def estimated_position(amplitude, positions, rule: str = "argmax", threshold: float = 0.5) -> np.ndarray:
    """Point summary of a reconstruction (argmax or thresholded centroid)."""
    amp = np.asarray(amplitude, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if not np.all(np.isfinite(amp)):
        raise ValueError("non-finite amplitudes")
    top = amp.max() if amp.size else 0.0
    if not top > 0:
        raise ValueError("all-zero reconstruction")
    if rule == "argmax":
        return positions[int(np.argmax(amp))].copy()
    if rule == "centroid":
        sel = amp >= threshold * top
        if threshold >= 1.0:
            return positions[int(np.argmax(amp))].copy()
        w = amp[sel]
        return (w[:, None] * positions[sel]).sum(axis=0) / w.sum()
    raise ValueError(f"unknown rule {rule!r}")


def localization_error(p_true, p_est) -> float:
    return float(np.linalg.norm(np.asarray(p_true, dtype=float) - np.asarray(p_est, dtype=float)))


@dataclass
class RegressionReport:
    slope: float
    intercept: float
    residuals: np.ndarray
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int
    slope_stderr: float

    def predict(self, x) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(x, dtype=float)


def depth_bias_regression(true_depth, est_depth, *, level: float = 0.95,
                          grid_points: int = 101) -> RegressionReport:
    """OLS of estimated on true depth with a pointwise mean-response band."""
    x = np.asarray(true_depth, dtype=float).ravel()
    y = np.asarray(est_depth, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("depth arrays differ in length")
    n = x.size
    if n < 3:
        raise ValueError("at least three pairs are required")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 1e-12 * max(1.0, float(np.sum(x * x))):
        raise ValueError("true depths are constant")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    s2 = float(np.sum(resid ** 2) / (n - 2))
    tq = float(stats.t.ppf(0.5 + level / 2.0, n - 2))
    grid = np.linspace(x.min(), x.max(), grid_points)
    half = tq * np.sqrt(s2 * (1.0 / n + (grid - xm) ** 2 / sxx))
    fit = intercept + slope * grid
    return RegressionReport(slope, intercept, resid, grid, fit - half, fit + half, n,
                            float(np.sqrt(s2 / sxx)))


def spearman(x, y) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


METRIC_FIELDS = ("solver", "source_model", "source_index", "true_depth_mm", "est_depth_mm",
                 "loc_err_mm", "emd_mm")


def write_metrics_csv(path, rows) -> Path:
    """Rows are tuples in `METRIC_FIELDS` order; floats are written with repr."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1], int(r[2])] + [repr(float(v)) for v in r[3:]])
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header")
        out = []
        for r in reader:
            out.append({"solver": r["solver"], "source_model": r["source_model"],
                         "source_index": int(r["source_index"]),
                         **{k: float(r[k]) for k in METRIC_FIELDS[3:]}})
    return out
