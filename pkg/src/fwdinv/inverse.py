"""Inverse solvers: MNE, sLORETA, dipole scan, SHAL1R and SKF.

All solvers take a lead field matrix ``L`` (electrodes x 3 sources) whose
column triples belong to one source position.  SHAL1R and SKF are
emulations of the published methods (see ``algorithm_variant``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

SOLVERS = ("sloreta", "shal1r", "skf", "ds", "mne")

SHAL1R_VARIANT = "irl1-group-lasso/fista/working-set/v2"
SKF_VARIANT = "random-walk-kalman/electrode-space-covariance/v1"


class InverseError(RuntimeError):
    """A solver could not produce a reconstruction."""


@dataclass
class Measurement:
    """Average-referenced electrode data, (m,) or (samples, m)."""

    data: np.ndarray
    snr_db: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim not in (1, 2):
            raise ValueError("measurement must be a vector or a (samples, electrodes) array")
        scale = np.abs(self.data).sum(axis=-1)
        off = np.abs(self.data.sum(axis=-1))
        if np.any(off > 1e-10 * np.maximum(scale, 1e-300)):
            raise ValueError("measurement is not average-referenced")

    @property
    def n_samples(self) -> int:
        return 1 if self.data.ndim == 1 else self.data.shape[0]

    def samples(self) -> np.ndarray:
        return np.atleast_2d(self.data)


@dataclass
class Reconstruction:
    """Per-source amplitudes (and moments) for one or more time samples.

    ``amplitude`` is (n,) or (samples, n); ``moment`` is (n, 3) or
    (samples, n, 3) or ``None``.  When ``moment`` is present the amplitude
    is its per-source Euclidean norm.
    """

    amplitude: np.ndarray
    moment: np.ndarray | None
    solver: str
    source_model: str = ""
    regularization: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.amplitude)):
            raise InverseError(f"{self.solver}: non-finite amplitudes")

    @property
    def n_sources(self) -> int:
        return self.amplitude.shape[-1]

    def final_amplitude(self) -> np.ndarray:
        """Amplitudes of the last sample (the only one for static solvers)."""
        return self.amplitude if self.amplitude.ndim == 1 else self.amplitude[-1]

    def argmax(self) -> int:
        """Index of the largest final amplitude; ties go to the lowest index."""
        return int(np.argmax(self.final_amplitude()))


def _blocks(lmat: np.ndarray) -> np.ndarray:
    m, n3 = lmat.shape
    if n3 % 3:
        raise ValueError("lead field needs three columns per source")
    return lmat.reshape(m, n3 // 3, 3)


def _vector(m) -> np.ndarray:
    if isinstance(m, Measurement):
        if m.data.ndim != 1:
            raise ValueError("static solvers need a single sample")
        return m.data
    return np.asarray(m, dtype=float).ravel()


def select_lambda(lmat, snr_db: float) -> float:
    """``trace(L L^T) / (m 10^(snr/10))``."""
    lmat = np.asarray(lmat, dtype=float)
    if not np.isfinite(snr_db):
        if snr_db > 0:
            return 0.0
        raise ValueError("snr_db must be finite or +inf")
    return float(np.sum(lmat * lmat) / (lmat.shape[0] * 10.0 ** (snr_db / 10.0)))


def _kernel_factor(lmat: np.ndarray, lam: float):
    if lam <= 0:
        raise ValueError("regularization parameter must be positive")
    gram = lmat @ lmat.T
    gram = 0.5 * (gram + gram.T) + lam * np.eye(gram.shape[0])
    try:
        return sla.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError as exc:
        raise InverseError(f"kernel factorization failed (condition {np.linalg.cond(gram):.2e})") from exc


def mne(lmat, m, lam: float, *, source_model: str = "") -> Reconstruction:
    """Minimum-norm estimate ``L^T (L L^T + lam I)^{-1} m``."""
    lmat = np.asarray(lmat, dtype=float)
    y = _vector(m)
    cf = _kernel_factor(lmat, lam)
    j = lmat.T @ sla.cho_solve(cf, y)
    mom = j.reshape(-1, 3) if lmat.shape[1] % 3 == 0 else j[:, None]
    return Reconstruction(np.linalg.norm(mom, axis=1), mom, "mne", source_model, {"lambda": lam},
                          {"current": j})


def resolution_blocks(lmat: np.ndarray, lam: float, cf=None) -> np.ndarray:
    """Diagonal 3x3 blocks of ``R = L^T (L L^T + lam I)^{-1} L``."""
    if cf is None:
        cf = _kernel_factor(lmat, lam)
    w = sla.cho_solve(cf, lmat)
    lb, wb = _blocks(lmat), _blocks(w)
    r = np.einsum("eja,ejb->jab", lb, wb)
    return 0.5 * (r + r.transpose(0, 2, 1))


def _block_pinv_sqrt(r: np.ndarray, cutoff: float = 1e-6):
    """Per-block ``R^{+1/2}`` with a relative eigenvalue cutoff; flags null blocks."""
    vals, vecs = np.linalg.eigh(r)
    top = vals[:, -1:]
    global_top = float(vals.max()) if vals.size else 0.0
    null = top[:, 0] <= 1e-12 * max(global_top, 1e-300)
    keep = (vals > cutoff * top) & ~null[:, None]
    inv_sqrt = np.where(keep, 1.0 / np.sqrt(np.where(keep, vals, 1.0)), 0.0)
    return np.einsum("jab,jb,jcb->jac", vecs, inv_sqrt, vecs), null


class SloretaOperator:
    """sLORETA for a fixed lead field and ``lam``; reusable across measurements."""

    def __init__(self, lmat, lam: float, cutoff: float = 1e-6):
        lmat = np.asarray(lmat, dtype=float)
        self.lam, self.cutoff = lam, cutoff
        cf = _kernel_factor(lmat, lam)
        self.kernel = sla.cho_solve(cf, lmat).T  # L^T (L L^T + lam I)^{-1}
        self.resolution = resolution_blocks(lmat, lam, cf)
        self.whiten, self.null = _block_pinv_sqrt(self.resolution, cutoff)

    def __call__(self, m, source_model: str = "") -> Reconstruction:
        j = (self.kernel @ _vector(m)).reshape(-1, 3)
        mom = np.einsum("jab,jb->ja", self.whiten, j)
        return Reconstruction(np.linalg.norm(mom, axis=1), mom, "sloreta", source_model,
                              {"lambda": self.lam, "pinv_cutoff": self.cutoff},
                              {"null_blocks": np.nonzero(self.null)[0]})

    def standardization(self) -> np.ndarray:
        """``sqrt(trace R_jj)`` per source (used by SHAL1R)."""
        return np.sqrt(np.trace(self.resolution, axis1=1, axis2=2))


def sloreta(lmat, m, lam: float, *, cutoff: float = 1e-6, source_model: str = "") -> Reconstruction:
    """Standardized minimum norm: ``s_j = J_j^T R_jj^+ J_j``.

    The returned moment is ``R_jj^{+1/2} J_j`` so its norm is ``sqrt(s_j)``.
    Near-null ``R_jj`` blocks give amplitude 0 and are listed in
    ``diagnostics["null_blocks"]``.
    """
    return SloretaOperator(lmat, lam, cutoff)(m, source_model)


def dipole_scan(lmat, m, *, rank_tol: float = 1e-10, source_model: str = "") -> Reconstruction:
    """Goodness of fit ``||P_j m||^2 / ||m||^2`` of every source block.

    The amplitude field is the scan map (gof); least-squares moments are in
    ``diagnostics["fitted_moment"]`` and the best index in ``diagnostics["best"]``.
    """
    lmat = np.asarray(lmat, dtype=float)
    y = _vector(m)
    ny = float(y @ y)
    if ny == 0.0:
        raise InverseError("dipole scan of an all-zero measurement")
    lb = _blocks(lmat).transpose(1, 0, 2)  # (n, m, 3)
    u, s, vt = np.linalg.svd(lb, full_matrices=False)
    keep = s > rank_tol * np.maximum(s[:, :1], 1e-300)
    if np.any(~keep[:, 0]):
        raise InverseError(f"zero lead-field block at sources {np.nonzero(~keep[:, 0])[0][:10].tolist()}")
    proj = np.einsum("jea,e->ja", u, y) * keep
    gof = (proj ** 2).sum(axis=1) / ny
    sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    fitted = np.einsum("jab,jb->ja", vt.transpose(0, 2, 1), sinv * proj)
    best = int(np.argmax(gof))
    return Reconstruction(gof, None, "ds", source_model, {},
                          {"fitted_moment": fitted, "best": best, "gof": gof})


# SHAL1R emulation -------------------------------------------------------------------

def _power_norm(lmat: np.ndarray, iters: int = 50) -> float:
    """Power-iteration estimate of ``||L^T L||_2`` from a fixed start vector."""
    v = np.ones(lmat.shape[1]) / np.sqrt(lmat.shape[1])
    est = 0.0
    for _ in range(iters):
        w = lmat.T @ (lmat @ v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est


def _group_fista(gram: np.ndarray, corr: np.ndarray, pen: np.ndarray, x0: np.ndarray,
                 step: float, tol: float, max_iter: int):
    """FISTA with adaptive restart for ``1/2 x^T G x - c^T x + sum_j pen_j ||x_j||``.

    ``gram`` is ``L_S^T L_S`` for the block subset ``S`` and ``corr`` is
    ``L_S^T y``; ``x`` is flattened with three entries per block.
    """
    x = x0.ravel().copy()
    z = x.copy()
    t = 1.0
    thr = step * pen
    for it in range(1, max_iter + 1):
        v = (z - step * (gram @ z - corr)).reshape(-1, 3)
        nv = np.sqrt((v * v).sum(axis=1))
        shrink = np.maximum(0.0, 1.0 - thr / np.maximum(nv, 1e-300))
        x_new = (v * shrink[:, None]).ravel()
        dx = x_new - x
        if (z - x_new) @ dx > 0:  # momentum points uphill: restart
            t = 1.0
            z = x_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * dx
            t = t_new
        x = x_new
        if np.sqrt(dx @ dx) <= tol * max(np.sqrt(x @ x), 1e-300):
            return x.reshape(-1, 3), it, True
    return x.reshape(-1, 3), max_iter, False


@dataclass
class Shal1rParams:
    lambda_std: float
    alpha: float = 0.1  # penalty relative to max_j ||L_j^T m||
    eps: float = 1e-3  # reweighting floor relative to the largest block norm
    max_iter: int = 10  # reweighting rounds
    inner_iter: int = 5000
    tol: float = 1e-7
    penalty: str = "whitened"  # "whitened": ||L_j x_j||, "column": ||L_j||_F ||x_j||, "plain": ||x_j||
    round_tol: float = 1e-4  # stop once block norms settle (relative to the largest)


def shal1r(lmat, m, params: Shal1rParams, *, source_model: str = "",
           standardization: np.ndarray | None = None) -> Reconstruction:
    """Standardized adaptive (reweighted) group-L1 regression, emulated.

    Rounds of ``min 1/2 ||m - L x||^2 + alpha sum_j w_j N_j(x_j)`` are solved
    with FISTA on a working set of blocks (grown from KKT violations), with
    fixed step ``0.95 / (power estimate of ||L^T L||)``.  The block norm
    ``N_j`` is ``||L_j x_j||`` for ``penalty="whitened"`` (solved in
    orthonormalized block coordinates), ``||L_j||_F ||x_j||`` for
    ``"column"`` and ``||x_j||`` for ``"plain"``.  Weights start at 1 and
    are then updated as ``w_j = 1 / (N_j / N_max + eps)``.
    Rounds stop when the support is unchanged and no block norm moved by
    more than ``round_tol * N_max``, or after ``max_iter`` rounds.
    The final amplitude is ``||x_j|| / sqrt(trace R_jj)`` with ``R`` the
    sLORETA resolution kernel at ``lambda_std``; pass ``standardization``
    to reuse precomputed ``sqrt(trace R_jj)`` values.
    """
    lmat = np.asarray(lmat, dtype=float)
    y = _vector(m)
    lb = _blocks(lmat)
    n = lb.shape[1]
    reg = {"lambda_std": params.lambda_std, "alpha": params.alpha, "eps": params.eps,
           "penalty": params.penalty, "algorithm_variant": SHAL1R_VARIANT}
    diag: dict = {"rounds": 0, "inner_iterations": 0, "converged": True, "all_zero": False,
                  "ambiguous": False}
    if standardization is None:
        r = resolution_blocks(lmat, params.lambda_std)
        std = np.sqrt(np.trace(r, axis1=1, axis2=2))
    else:
        std = np.asarray(standardization, dtype=float)
    corr = np.linalg.norm(np.einsum("eja,e->ja", lb, y), axis=1)
    if not np.any(corr > 0):
        diag["all_zero"] = True
        return Reconstruction(np.zeros(n), np.zeros((n, 3)), "shal1r", source_model, reg, diag)

    work, back = _penalized_blocks(lb, params.penalty)
    corr = np.linalg.norm(np.einsum("eja,e->ja", work, y), axis=1)
    w = np.ones(n)
    alpha = params.alpha * float(corr.max())
    z = np.zeros((n, 3))
    active_prev = norms_prev = None
    for rnd in range(1, params.max_iter + 1):
        pen = alpha * w
        z, it, ok = _solve_working_set(work, y, pen, z, params)
        diag["inner_iterations"] += it
        diag["converged"] &= ok
        diag["rounds"] = rnd
        norms = np.linalg.norm(z, axis=1)
        zmax = norms.max()
        if zmax == 0.0:
            break
        active = norms > 0
        if (active_prev is not None and np.array_equal(active, active_prev)
                and np.max(np.abs(norms - norms_prev)) <= params.round_tol * zmax):
            break
        active_prev, norms_prev = active, norms
        w = 1.0 / (norms / zmax + params.eps)
        w = w / w.min()
    x = np.einsum("jab,jb->ja", back, z)
    norms = np.linalg.norm(x, axis=1)
    if not np.any(norms > 0):
        diag["all_zero"] = True
    safe = np.where(std > 0, std, np.inf)
    mom = x / safe[:, None]
    amp = np.linalg.norm(mom, axis=1)
    top = amp.max()
    if top > 0 and np.count_nonzero(amp >= top * (1 - 1e-12)) > 1:
        diag["ambiguous"] = True
    diag["support"] = np.nonzero(norms > 0)[0]
    diag["raw"] = x
    return Reconstruction(amp, mom, "shal1r", source_model, reg, diag)


def _penalized_blocks(lb: np.ndarray, penalty: str):
    """Blocks the group penalty acts on and the (n, 3, 3) maps back to moments."""
    n = lb.shape[1]
    if penalty == "plain":
        return lb, np.broadcast_to(np.eye(3), (n, 3, 3))
    if penalty == "column":
        cn = np.linalg.norm(lb, axis=(0, 2))
        scale = np.where(cn > 0, cn, 1.0)
        return lb / scale[None, :, None], np.eye(3)[None] / scale[:, None, None]
    if penalty == "whitened":
        u, s, vt = np.linalg.svd(lb.transpose(1, 0, 2), full_matrices=False)
        keep = s > 1e-10 * np.maximum(s[:, :1], 1e-300)
        sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        work = (u * keep[:, None, :]).transpose(1, 0, 2)
        return work, np.einsum("jba,jb->jab", vt, sinv)
    raise ValueError(f"unknown SHAL1R penalty {penalty!r}")


def _solve_working_set(lb, y, pen, x0, params: Shal1rParams):
    """Group lasso on the full set, solved on a growing working set of blocks.

    Blocks violating the optimality condition ``||L_j^T r|| <= pen_j`` are
    added (largest violation first) until none remain.
    """
    n = lb.shape[1]
    x = x0.copy()
    ws = np.nonzero(np.linalg.norm(x, axis=1) > 0)[0]
    total_it = 0
    converged = True
    for _ in range(100):
        if ws.size:
            sub = lb[:, ws].reshape(lb.shape[0], -1)
            step = 0.95 / _power_norm(sub)
            xs, it, ok = _group_fista(sub.T @ sub, sub.T @ y, pen[ws], x[ws], step,
                                      params.tol, params.inner_iter)
            total_it += it
            converged &= ok
            x = np.zeros((n, 3))
            x[ws] = xs
            ws = ws[np.linalg.norm(xs, axis=1) > 0]
        resid = y - np.einsum("eja,ja->e", lb[:, ws], x[ws]) if ws.size else y.copy()
        grad = np.linalg.norm(np.einsum("eja,e->ja", lb, resid), axis=1)
        viol = grad - pen * (1 + 1e-6)
        viol[ws] = -np.inf
        cand = np.nonzero(viol > 0)[0]
        if cand.size == 0:
            break
        add = cand[np.argsort(-viol[cand], kind="stable")[:max(10, ws.size)]]
        ws = np.sort(np.concatenate([ws, add]))
    return x, total_it, converged


# SKF emulation ----------------------------------------------------------------------

@dataclass
class SkfParams:
    q_evolution: float
    r_noise: float
    lambda_std: float | None = None  # recorded only; standardization uses the posterior


def skf(lmat, series, params: SkfParams, *, source_model: str = "") -> Reconstruction:
    """Random-walk Kalman filter with per-step standardization, emulated.

    The state covariance is kept as ``P = a I - L^T B L`` with an
    electrode-space matrix ``B``, so each step costs ``O(m^2 n)``.  Each
    3-block of the posterior mean is divided by the square root of the
    trace of its posterior covariance block.
    """
    lmat = np.asarray(lmat, dtype=float)
    data = series.samples() if isinstance(series, Measurement) else np.atleast_2d(np.asarray(series, dtype=float))
    if data.shape[0] < 2:
        raise ValueError("SKF needs at least two samples")
    q, r = params.q_evolution, params.r_noise
    if q <= 0 or r <= 0:
        raise ValueError("q_evolution and r_noise must be positive")
    nel, n3 = lmat.shape
    gram = lmat @ lmat.T
    gram = 0.5 * (gram + gram.T)
    eye = np.eye(nel)
    a = q
    b = np.zeros((nel, nel))
    x = np.zeros(n3)
    amps = np.zeros((data.shape[0], n3 // 3))
    moms = np.zeros((data.shape[0], n3 // 3, 3))
    rejected = []
    changes = np.zeros(data.shape[0])
    for k, yk in enumerate(data):
        a = a + q
        h = a * eye - b @ gram
        s = a * gram - gram @ b @ gram + r * eye
        s = 0.5 * (s + s.T)
        try:
            cf = sla.cho_factor(s, lower=True)
        except np.linalg.LinAlgError:
            rejected.append(k)
        else:
            innov = yk - lmat @ x
            dx = lmat.T @ (h @ sla.cho_solve(cf, innov))
            b = b + h @ sla.cho_solve(cf, h.T)
            b = 0.5 * (b + b.T)
            x = x + dx
            changes[k] = np.linalg.norm(dx)
        pdiag = a - np.einsum("ec,ef,fc->c", lmat, b, lmat)
        tr = pdiag.reshape(-1, 3).sum(axis=1)
        std = np.sqrt(np.maximum(tr, 0.0))
        mk = x.reshape(-1, 3) / np.where(std > 0, std, np.inf)[:, None]
        moms[k] = mk
        amps[k] = np.linalg.norm(mk, axis=1)
    reg = {"q_evolution": q, "r_noise": r, "lambda_std": params.lambda_std,
           "algorithm_variant": SKF_VARIANT}
    return Reconstruction(amps, moms, "skf", source_model, reg,
                          {"rejected_steps": rejected, "step_change": changes, "state": x})


def run_solver(tag: str, lmat, m, *, lam: float, shal1r_params: Shal1rParams | None = None,
               skf_params: SkfParams | None = None, source_model: str = "") -> Reconstruction:
    """Dispatch by solver tag."""
    if tag == "mne":
        return mne(lmat, m, lam, source_model=source_model)
    if tag == "sloreta":
        return sloreta(lmat, m, lam, source_model=source_model)
    if tag == "ds":
        return dipole_scan(lmat, m, source_model=source_model)
    if tag == "shal1r":
        return shal1r(lmat, m, shal1r_params or Shal1rParams(lambda_std=lam), source_model=source_model)
    if tag == "skf":
        if skf_params is None:
            raise ValueError("SKF needs explicit parameters")
        return skf(lmat, m, skf_params, source_model=source_model)
    raise ValueError(f"unknown solver {tag!r}; expected one of {SOLVERS}")
