"""Expected-norm sensitivity bounds for one attention layer and length sweeps.

Per instance (a trace plus a query index ``i``) we compute

* ``C_K = max_j |v_j - h_i| |Wk^T q_i|``
* ``C_Q = max_m |v_m - h_i| |Wq^T (k_m - kbar_i)|``  (centered keys)
* the uniform averages over j of the value / key / query path norms
* the off-diagonal bound ``(|Wv| + C_K/sqrt(d_k)) / T`` and the diagonal bound
  ``|I| + E[alpha_ii] (|Wv| + C_K/sqrt(d_k) + C_Q/sqrt(d_k))``
* ``diag_bound_safe = |I| + alpha_ii (|Wv| + C_K/sqrt(d_k)) + C_Q/sqrt(d_k)``,
  which follows from the triangle inequality. The query path at j = i carries
  no alpha_ii factor, so the first diagonal form can be exceeded when alpha_ii
  is small (long sequences).

and compare them against measured norms of the residual Jacobian. The
measured off-diagonal average runs over j != i, so it is checked against the
off-diagonal bound scaled by T/(T-1).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import NO_REG, AttnTrace, AttnWeights, Regularizer, attn_forward
from .jacobian import jac_query, jac_row
from .linalg import identity_norm, matrix_norm, matrix_norms
from .rng import derive_seed

KEY_TOL = 1e-12
OFFDIAG_TOL = 1e-9


@dataclass
class BoundReport:
    T: int
    i: int
    c_k: float
    c_q: float
    wv_norm: float
    e_value_norm: float
    e_key: float
    e_query: float
    key_bound: float
    query_bound: float
    offdiag_bound: float
    offdiag_bound_corrected: float
    diag_bound: float
    diag_bound_safe: float
    measured_offdiag_mean: float
    measured_uniform_mean: float
    measured_diag: float
    mean_diag_alpha: float
    has_offdiag: bool = True
    norm: str = "spectral"
    samples: int = 1
    violations: int = 0


@dataclass
class SweepConfig:
    T_values: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    samples: int = 100
    seed: int = 0
    d_model: int = 8
    d_k: int = 8
    d_v: int = 8
    norm: str = "spectral"


def constant_ck(trace: AttnTrace, w: AttnWeights, i: int) -> float:
    left = np.linalg.norm(trace.V - trace.H[i], axis=1)
    return float(np.max(left) * np.linalg.norm(w.Wk.T @ trace.Q[i]))


def constant_cq(trace: AttnTrace, w: AttnWeights, i: int) -> float:
    left = np.linalg.norm(trace.V - trace.H[i], axis=1)
    kbar = trace.Alpha[i] @ trace.K
    right = np.linalg.norm((trace.K - kbar) @ w.Wq, axis=1)
    return float(np.max(left * right))


def expected_norms(trace: AttnTrace, w: AttnWeights, i: int, norm: str = "spectral") -> tuple[float, float, float]:
    """Uniform averages over j of the value, key and query path norms."""
    T = trace.T
    a = trace.Alpha[i]
    wv = matrix_norm(w.Wv, norm)
    e_value = float(np.sum(a * wv)) / T
    left = np.linalg.norm(trace.V - trace.H[i], axis=1)
    e_key = float(np.sum(a * left)) * float(np.linalg.norm(w.Wk.T @ trace.Q[i])) / (T * np.sqrt(w.d_k))
    e_query = matrix_norm(jac_query(trace, w, i, i), norm) / T
    return e_value, e_key, e_query


def eq8_bounds(trace: AttnTrace, w: AttnWeights, i: int, norm: str = "spectral") -> BoundReport:
    if w.d_v != w.d_model:
        raise ValueError("the residual bound needs d_v == d_model")
    T = trace.T
    sk = math.sqrt(w.d_k)
    ck, cq = constant_ck(trace, w, i), constant_cq(trace, w, i)
    wv = matrix_norm(w.Wv, norm)
    e_value, e_key, e_query = expected_norms(trace, w, i, norm)
    a_ii = float(trace.Alpha[i, i])
    measured = matrix_norms(jac_row(trace, w, i, residual=True), norm)
    off = np.delete(measured, i)
    offdiag_bound = (wv + ck / sk) / T
    has_off = T > 1
    rep = BoundReport(
        T=T,
        i=i,
        c_k=ck,
        c_q=cq,
        wv_norm=wv,
        e_value_norm=e_value,
        e_key=e_key,
        e_query=e_query,
        key_bound=ck / (T * sk),
        query_bound=cq / (T * sk),
        offdiag_bound=offdiag_bound if has_off else math.nan,
        offdiag_bound_corrected=offdiag_bound * T / (T - 1) if has_off else math.nan,
        diag_bound=identity_norm(w.d_model, norm) + a_ii * (wv + ck / sk + cq / sk),
        diag_bound_safe=identity_norm(w.d_model, norm) + a_ii * (wv + ck / sk) + cq / sk,
        measured_offdiag_mean=float(off.mean()) if has_off else math.nan,
        measured_uniform_mean=float(measured.mean()),
        measured_diag=float(measured[i]),
        mean_diag_alpha=a_ii,
        has_offdiag=has_off,
        norm=norm,
    )
    rep.violations = len(bound_violations(rep))
    return rep


def bound_violations(rep: BoundReport) -> list[str]:
    """Names of the checked inequalities that fail for a single-instance report."""
    bad = []
    if abs(rep.e_value_norm - rep.wv_norm / rep.T) >= KEY_TOL:
        bad.append("value_equality")
    if rep.e_key > rep.key_bound + KEY_TOL:
        bad.append("key")
    if rep.e_query > rep.query_bound + KEY_TOL:
        bad.append("query")
    if rep.has_offdiag and rep.measured_offdiag_mean > rep.offdiag_bound_corrected + OFFDIAG_TOL:
        bad.append("offdiag")
    return bad


def random_instance(cfg: SweepConfig, T: int, sample: int) -> tuple[np.ndarray, AttnWeights, int]:
    """Draw (X, weights, i) for one sweep sample; depends only on (seed, T, sample)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "sweep", T, sample))
    w = AttnWeights.init(cfg.d_model, cfg.d_k, cfg.d_v, rng)
    X = rng.uniform(-1.0, 1.0, size=(T, cfg.d_model))
    i = int(rng.integers(T))
    return X, w, i


def sample_report(cfg: SweepConfig, T: int, sample: int, reg: Regularizer = NO_REG) -> BoundReport:
    X, w, i = random_instance(cfg, T, sample)
    trace = attn_forward(X, w, reg, residual=True)
    return eq8_bounds(trace, w, i, cfg.norm)


def aggregate(reports: list[BoundReport], d_model: int, d_k: int) -> BoundReport:
    """Monte-Carlo means; the bounds are rebuilt from the mean constants."""
    T = reports[0].T
    norm = reports[0].norm
    mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))  # noqa: E731
    sk = math.sqrt(d_k)
    ck, cq, wv, a = mean("c_k"), mean("c_q"), mean("wv_norm"), mean("mean_diag_alpha")
    has_off = T > 1
    off = (wv + ck / sk) / T
    return BoundReport(
        T=T,
        i=-1,
        c_k=ck,
        c_q=cq,
        wv_norm=wv,
        e_value_norm=mean("e_value_norm"),
        e_key=mean("e_key"),
        e_query=mean("e_query"),
        key_bound=ck / (T * sk),
        query_bound=cq / (T * sk),
        offdiag_bound=off if has_off else math.nan,
        offdiag_bound_corrected=off * T / (T - 1) if has_off else math.nan,
        diag_bound=identity_norm(d_model, norm) + a * (wv + ck / sk + cq / sk),
        diag_bound_safe=identity_norm(d_model, norm) + a * (wv + ck / sk) + cq / sk,
        measured_offdiag_mean=mean("measured_offdiag_mean") if has_off else math.nan,
        measured_uniform_mean=mean("measured_uniform_mean"),
        measured_diag=mean("measured_diag"),
        mean_diag_alpha=a,
        has_offdiag=has_off,
        norm=norm,
        samples=len(reports),
        violations=sum(r.violations for r in reports),
    )


def sweep_T(cfg: SweepConfig) -> list[BoundReport]:
    return [agg for agg, _ in sweep_T_detailed(cfg)]


def sweep_T_detailed(cfg: SweepConfig) -> list[tuple[BoundReport, list[BoundReport]]]:
    Ts = list(cfg.T_values)
    if not Ts or Ts != sorted(Ts) or Ts[0] < 1:
        raise ValueError("T values must be a non-empty ascending list of positive lengths")
    if cfg.samples < 1:
        raise ValueError("need at least one sample per T")
    out = []
    for T in Ts:
        per = [sample_report(cfg, T, s) for s in range(cfg.samples)]
        out.append((aggregate(per, cfg.d_model, cfg.d_k), per))
    return out


def diag_mass(Alpha, floor: float = 1e-15) -> tuple[float, float, float]:
    """(mean diagonal, mean off-diagonal, ratio); ratio is NaN when off-diagonal mass is ~0."""
    A = np.asarray(Alpha, dtype=np.float64)
    T = A.shape[-1]
    d = float(np.mean(np.diagonal(A, axis1=-2, axis2=-1)))
    if T == 1:
        return d, math.nan, math.nan
    off = (float(np.sum(A)) / np.prod(A.shape[:-2], dtype=np.int64) - d * T) / (T * (T - 1))
    off = max(off, 0.0) if abs(off) < floor else off
    ratio = d / off if off >= floor else math.nan
    return d, off, ratio


def reports_csv(reports: list[BoundReport]) -> str:
    names = [f.name for f in fields(BoundReport)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for r in reports:
        row = asdict(r)
        writer.writerow([_fmt(row[n]) for n in names])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)
