"""Analytic-versus-numerical derivative suites driven by ``diagsink gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttnWeights, Regularizer, attn_forward
from .jacobian import finite_diff_jacobian, jac_key, jac_query, jac_total, rel_error, softmax_jacobian_row
from .linalg import softmax_row
from .model import ModelConfig, TnSModel, model_backward, model_forward, masked_mae
from .rng import derive_seed

REG_CYCLE = ("none", "penalty", "mask")
ATTN_FLOOR = 1e-8 / 1e-5
MODEL_FLOOR = 1e-6 / 1e-4


@dataclass
class Case:
    index: int
    seed: int
    T: int
    d_model: int
    d_k: int
    d_v: int
    reg: Regularizer

    def label(self) -> str:
        return f"T={self.T} dims=({self.d_model},{self.d_k},{self.d_v}) reg={self.reg.kind} seed={self.seed}"


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    tolerance: float
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_err < self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name}: max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:g} {verdict}"


def attention_case(root: int, k: int, T: int | None = None):
    """Configuration k of the suite: (case, X, weights). Depends only on (root, k, T)."""
    seed = derive_seed(root, "gradcheck", k)
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 9)) if not T else T
    d_model, d_k, d_v = (int(v) for v in rng.integers(2, 17, size=3))
    kind = REG_CYCLE[k % len(REG_CYCLE)]
    if kind == "penalty":
        reg = Regularizer.penalty(float(rng.uniform(-1.0, 1.0)))
    else:
        reg = Regularizer(kind)
    w = AttnWeights(
        rng.uniform(-1.0, 1.0, (d_k, d_model)),
        rng.uniform(-1.0, 1.0, (d_k, d_model)),
        rng.uniform(-1.0, 1.0, (d_v, d_model)),
    )
    X = rng.uniform(-1.0, 1.0, (T, d_model))
    return Case(k, seed, T, d_model, d_k, d_v, reg), X, w


def attention_jacobian_suite(root: int, n_configs: int, tol: float, T: int | None = None) -> SuiteResult:
    res = SuiteResult("attention-jacobian", 0.0, tol)
    for k in range(n_configs):
        case, X, w = attention_case(root, k, T)
        trace = attn_forward(X, w, case.reg)
        for i in range(case.T):
            for j in range(case.T):
                err = rel_error(jac_total(trace, w, i, j).total_no_res, finite_diff_jacobian(X, w, case.reg, False, i, j), ATTN_FLOOR)
                if err > res.max_rel_err:
                    res.max_rel_err, res.worst = err, f"{case.label()} i={i} j={j}"
                if not err < tol:
                    res.failures.append(f"{case.label()} i={i} j={j} rel_err={err:.3e}")
    return res


def key_rank_ratio(m: np.ndarray) -> tuple[float, float]:
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[0]), float(s[1]) if len(s) > 1 else 0.0


def path_identity_suite(root: int, n_configs: int, T: int | None = None) -> SuiteResult:
    """Query path vanishes off the diagonal; key path is rank one. Reports the worst sigma2/sigma1."""
    res = SuiteResult("attention-paths", 0.0, 1e-10)
    for k in range(n_configs):
        case, X, w = attention_case(root, k, T)
        trace = attn_forward(X, w, case.reg)
        for i in range(case.T):
            for j in range(case.T):
                if i != j and np.any(jac_query(trace, w, i, j) != 0.0):
                    res.failures.append(f"{case.label()} i={i} j={j}: query path nonzero off the diagonal")
                s1, s2 = key_rank_ratio(jac_key(trace, w, i, j))
                if s1 < 1e-12 and s2 < 1e-12:
                    continue
                r = s2 / s1
                if r > res.max_rel_err:
                    res.max_rel_err, res.worst = r, f"{case.label()} i={i} j={j}"
                if not r < 1e-10:
                    res.failures.append(f"{case.label()} i={i} j={j}: key path sigma2/sigma1={r:.3e}")
    return res


def softmax_suite(root: int, n_configs: int, tol: float, T: int | None = None, step: float = 1e-5) -> SuiteResult:
    """Row Jacobian of softmax against central differences; rows must also sum to zero."""
    res = SuiteResult("softmax-jacobian", 0.0, tol)
    for k in range(n_configs):
        case, X, w = attention_case(root, k, T)
        trace = attn_forward(X, w, case.reg)
        for i in range(case.T):
            e = trace.E[i]
            J = softmax_jacobian_row(trace.Alpha[i])
            fd = np.empty_like(J)
            for c in range(case.T):
                ep, em = e.copy(), e.copy()
                ep[c] += step
                em[c] -= step
                fd[:, c] = (softmax_row(ep) - softmax_row(em)) / (2 * step)
            err = rel_error(J, fd, ATTN_FLOOR)
            if err > res.max_rel_err:
                res.max_rel_err, res.worst = err, f"{case.label()} i={i}"
            if not err < tol:
                res.failures.append(f"{case.label()} i={i} rel_err={err:.3e}")
            rowsum = float(np.max(np.abs(J.sum(axis=1))))
            if rowsum > 1e-14:
                res.failures.append(f"{case.label()} i={i}: row sum {rowsum:.3e}")
    return res


def gradcheck_model_config() -> ModelConfig:
    """Full-width model with short windows, to keep finite differences cheap."""
    return ModelConfig(n_nodes=20, d_x=1, window=6, horizon=4)


def model_gradient_suite(
    root: int, n_coords: int, tol: float, cfg: ModelConfig | None = None, reg: Regularizer | None = None, step: float = 1e-6
) -> SuiteResult:
    """Finite differences of the masked MAE at random parameter coordinates (dropout off)."""
    cfg = cfg or gradcheck_model_config()
    reg = reg or Regularizer()
    if not reg.deterministic:
        raise ValueError("model gradcheck runs with dropout off")
    seed = derive_seed(root, "gradcheck", "model")
    rng = np.random.default_rng(seed)
    model = TnSModel.init(cfg, rng, reg)
    x = rng.normal(size=(2, cfg.n_nodes, cfg.window, cfg.d_x))
    y = rng.normal(size=(2, cfg.n_nodes, cfg.horizon))
    mask = (rng.uniform(size=y.shape) > 0.1).astype(np.float64)
    _, grads = model_backward(x, y, model, mask)
    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names], dtype=np.float64)
    res = SuiteResult("model-gradient", 0.0, tol)
    label = f"residual={cfg.residual} reg={reg.kind} seed={seed}"

    def loss() -> float:
        return masked_mae(model_forward(x, model)[0], y, mask)[0]

    for _ in range(n_coords):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + step
        lp = loss()
        p[idx] = old - step
        lm = loss()
        p[idx] = old
        fd = (lp - lm) / (2 * step)
        err = rel_error(grads[name][idx], fd, MODEL_FLOOR)
        if err > res.max_rel_err:
            res.max_rel_err, res.worst = err, f"{label} {name}{list(idx)}"
        if not err < tol:
            res.failures.append(f"{label} {name}{list(idx)} analytic={grads[name][idx]:.6e} fd={fd:.6e}")
    return res
