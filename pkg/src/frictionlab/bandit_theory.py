"""Exact tabular machinery for the contaminated K-armed bandit.

Logit-space gradients of a softmax policy, population (exact enumeration)
and finite-batch update directions for PG, delight-gated PG and sign-blind
reweightings, overlap moments, and the normalized-step training loop.

Near optimality ``1 - pi(y*)`` is far below machine epsilon relative to 1,
so every complement ``1 - pi(a)`` for the dominant arm is computed as the
sum of the other probabilities rather than by subtraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .policy_core import gate_weight, stable_sigmoid
from .records import MetricRecord

log = logging.getLogger(__name__)

DELTA_GRID = (1e-1, 1e-2, 1e-3, 1e-4)


# --------------------------------------------------------------------------- types


@dataclass
class BanditLogits:
    z: np.ndarray
    y_star: int = 0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 1 or self.z.size < 2:
            raise ValueError("bandit needs at least two arms")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("logits must be finite")
        if not 0 <= self.y_star < self.z.size:
            raise IndexError(f"y_star={self.y_star} out of range for K={self.z.size}")

    @property
    def K(self) -> int:
        return self.z.size


@dataclass
class ContaminationSpec:
    rho: float
    nu: np.ndarray

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.float64)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if np.any(self.nu < 0) or abs(self.nu.sum() - 1.0) > 1e-12:
            raise ValueError("nu must be a probability vector")

    @classmethod
    def uniform(cls, K: int, rho: float) -> "ContaminationSpec":
        return cls(rho, np.full(K, 1.0 / K))

    @classmethod
    def point_mass(cls, K: int, arm: int, rho: float) -> "ContaminationSpec":
        nu = np.zeros(K)
        nu[arm] = 1.0
        return cls(rho, nu)


WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BanditEstimator:
    """PG, DG(eta) or an action-only reweighting ``f``.

    ``weights`` is either a fixed per-arm vector or a callable ``f(pi, mu)``
    evaluated at the current policy (exact importance weighting needs the
    latter during training).
    """

    tag: str
    eta: float = 1.0
    weights: np.ndarray | WeightFn | None = None

    def __post_init__(self):
        if self.tag not in ("PG", "DG", "REWEIGHTED"):
            raise ValueError(f"unknown estimator tag {self.tag!r}")
        if self.tag == "DG" and not self.eta > 0:
            raise ValueError("DG needs eta > 0")
        if self.tag == "REWEIGHTED":
            if self.weights is None:
                raise ValueError("REWEIGHTED needs per-arm weights")
            if not callable(self.weights) and np.any(np.asarray(self.weights) < 0):
                raise ValueError("reweighting must be non-negative")

    @classmethod
    def pg(cls) -> "BanditEstimator":
        return cls("PG")

    @classmethod
    def dg(cls, eta: float = 1.0) -> "BanditEstimator":
        return cls("DG", eta=eta)

    @classmethod
    def reweighted(cls, f) -> "BanditEstimator":
        return cls("REWEIGHTED", weights=f)

    @classmethod
    def exact_is(cls) -> "BanditEstimator":
        return cls("REWEIGHTED", weights=lambda pi, mu: pi / mu)

    @property
    def label(self) -> str:
        if self.tag == "DG":
            return f"dg:eta={self.eta:g}"
        return self.tag.lower()


@dataclass
class PopulationGradient:
    g: np.ndarray
    estimator_tag: str


# ----------------------------------------------------------------- softmax geometry


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(z) -> np.ndarray:
    return np.exp(log_softmax(z))


def one_minus(pi: np.ndarray) -> np.ndarray:
    """``1 - pi`` with the dominant entry computed as a sum of the others."""
    out = 1.0 - pi
    j = int(np.argmax(pi))
    out[j] = np.delete(pi, j).sum()
    return out


def mix_scores(pi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_a w[a] * (e_a - pi)`` evaluated coordinate-wise without cancellation."""
    # sum_{b != a} w[b], without subtracting a dominant weight from the total
    k = int(np.argmax(np.abs(w)))
    rest_k = np.delete(w, k).sum()
    rest = w[k] + (rest_k - w)
    rest[k] = rest_k
    return w * one_minus(pi) - pi * rest


def score_vector(pi, a: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if not 0 <= a < pi.size:
        raise IndexError(f"arm {a} out of range for K={pi.size}")
    w = np.zeros_like(pi)
    w[a] = 1.0
    return mix_scores(pi, w)


def true_gradient(spec: BanditLogits) -> np.ndarray:
    pi = softmax(spec.z)
    return pi[spec.y_star] * score_vector(pi, spec.y_star)


def suboptimality(spec: BanditLogits) -> float:
    pi = softmax(spec.z)
    return float(np.delete(pi, spec.y_star).sum())


def advantage_of(a: int, y_star: int) -> float:
    return 0.5 if a == y_star else -0.5


def advantages(K: int, y_star: int) -> np.ndarray:
    U = np.full(K, -0.5)
    U[y_star] = 0.5
    return U


def contaminate(pi, cont: ContaminationSpec) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != cont.nu.shape:
        raise ValueError(f"policy has {pi.size} arms but nu has {cont.nu.size}")
    return (1.0 - cont.rho) * pi + cont.rho * cont.nu


def delta_logits(K: int, delta: float, y_star: int = 0, spread: float = 20.0) -> BanditLogits:
    """Logits with ``pi(y*) = 1 - delta``.

    Disfavored logits are evenly spaced over ``[-spread, 0]``; the correct
    arm's logit is found by bisection on ``log(1 - pi(y*)) = log(delta)``.
    ``spread = 0`` gives the fully symmetric family ``[L, 0, ..., 0]``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    others = -np.linspace(0.0, spread, K - 1)
    lse_others = np.log(np.exp(others - others.max()).sum()) + others.max()

    def gap(L):
        # log(1 - pi(y*)) = lse_others - logaddexp(L, lse_others)
        return lse_others - np.logaddexp(L, lse_others) - np.log(delta)

    L = brentq(gap, lse_others - 50.0, lse_others + 800.0, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    z = np.insert(others, y_star, L)
    return BanditLogits(z, y_star)


# ------------------------------------------------------------------ update directions


def arm_coefficients(pi: np.ndarray, y_star: int, estimator: BanditEstimator,
                     mu: np.ndarray | None = None) -> np.ndarray:
    """Per-arm multiplier of the score ``e_a - pi`` for one sample of arm ``a``."""
    U = advantages(pi.size, y_star)
    if estimator.tag == "PG":
        return U
    if estimator.tag == "DG":
        return gate_weight(U, -np.log(pi), estimator.eta) * U
    f = estimator.weights(pi, mu) if callable(estimator.weights) else np.asarray(estimator.weights, float)
    if f.shape != pi.shape or np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("reweighting must be a finite non-negative per-arm vector")
    return f * U


def population_gradient(spec: BanditLogits, cont: ContaminationSpec,
                        estimator: BanditEstimator) -> PopulationGradient:
    pi = softmax(spec.z)
    mu = contaminate(pi, cont)
    coef = arm_coefficients(pi, spec.y_star, estimator, mu)
    return PopulationGradient(mix_scores(pi, mu * coef), estimator.tag)


def split_signal_noise(spec: BanditLogits, cont: ContaminationSpec,
                       estimator: BanditEstimator) -> tuple[np.ndarray, np.ndarray]:
    """Population direction split into the correct-arm term and the disfavored sum."""
    pi = softmax(spec.z)
    mu = contaminate(pi, cont)
    w = mu * arm_coefficients(pi, spec.y_star, estimator, mu)
    w_sig = np.zeros_like(w)
    w_sig[spec.y_star] = w[spec.y_star]
    return mix_scores(pi, w_sig), mix_scores(pi, w - w_sig)


def overlap_moment(pi, nu, y_star: int, eta: float = 1.0) -> float:
    pi = np.asarray(pi, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    mask = np.arange(pi.size) != y_star
    return float(np.sum(nu[mask] * pi[mask] ** (1.0 / (2.0 * eta))))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def sample_gradient(spec: BanditLogits, cont: ContaminationSpec, estimator: BanditEstimator,
                    B: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``B`` per-sample terms ``coef(a) * (e_a - pi)`` with ``a ~ mu``."""
    if B < 1:
        raise ValueError("batch size must be positive")
    pi = softmax(spec.z)
    mu = contaminate(pi, cont)
    counts = rng.multinomial(B, mu / mu.sum())
    coef = arm_coefficients(pi, spec.y_star, estimator, mu)
    return mix_scores(pi, counts * coef / B)


def normalized_step(z, g, alpha: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm == 0:
        log.debug("zero gradient: normalized step skipped")
        return z.copy()
    return z + alpha * np.asarray(g) / norm


# -------------------------------------------------------------------- training loop


@dataclass
class BanditConfig:
    K: int = 100
    rho: float = 0.1
    nu: np.ndarray | None = None  # None -> uniform
    B: int = 100
    alpha: float = 0.1
    steps: int = 2000
    seed: int = 0
    estimator: BanditEstimator = field(default_factory=BanditEstimator.dg)
    y_star: int = 0

    def contamination(self) -> ContaminationSpec:
        nu = np.full(self.K, 1.0 / self.K) if self.nu is None else self.nu
        return ContaminationSpec(self.rho, nu)


@dataclass
class BanditTrace:
    method: str
    seed: int
    suboptimality: np.ndarray
    cosine: np.ndarray  # sampled batch direction vs grad J
    population_cosine: np.ndarray  # expected direction under mu vs grad J
    skipped_steps: list[int]

    def to_records(self, run_id: str = "bandit", every: int = 1) -> list[MetricRecord]:
        rows = []
        for t in range(0, self.suboptimality.size, every):
            rows.append(MetricRecord(run_id, self.seed, t, self.method, "suboptimality",
                                     float(self.suboptimality[t])))
            rows.append(MetricRecord(run_id, self.seed, t, self.method, "cosine", float(self.cosine[t])))
            rows.append(MetricRecord(run_id, self.seed, t, self.method, "population_cosine",
                                     float(self.population_cosine[t])))
        return rows


def run_contaminated_bandit(cfg: BanditConfig) -> BanditTrace:
    """Normalized-step training from uniform logits on sampled update directions."""
    rng = np.random.default_rng(cfg.seed)
    cont = cfg.contamination()
    spec = BanditLogits(np.zeros(cfg.K), cfg.y_star)
    subopt = np.empty(cfg.steps)
    cosine = np.full(cfg.steps, np.nan)
    pop_cosine = np.empty(cfg.steps)
    skipped = []
    for t in range(cfg.steps):
        subopt[t] = suboptimality(spec)
        grad_j = true_gradient(spec)
        pop_cosine[t] = cosine_similarity(population_gradient(spec, cont, cfg.estimator).g, grad_j)
        g = sample_gradient(spec, cont, cfg.estimator, cfg.B, rng)
        if np.linalg.norm(g) == 0:
            skipped.append(t)
            continue
        cosine[t] = cosine_similarity(g, grad_j)
        spec = BanditLogits(normalized_step(spec.z, g, cfg.alpha), cfg.y_star)
    return BanditTrace(cfg.estimator.label, cfg.seed, subopt, cosine, pop_cosine, skipped)


# --------------------------------------------------------------- numerical checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _strictly_monotone(xs: Sequence[float], increasing: bool) -> bool:
    d = np.diff(np.asarray(xs))
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


def _heldout_constant(ratios: Sequence[float], n_fit: int = 2) -> tuple[float, bool]:
    """Fit ``C`` on the coarsest grid points and test it on the finer ones.

    Asymptotic ``O(.)`` claims are about ``delta -> 0``, so a constant that
    fits the coarse end must keep bounding the fine end.
    """
    C = max(ratios[:n_fit])
    return C, all(r <= C * (1 + 1e-9) for r in ratios[n_fit:])


def lemma1_violations(n: int = 100_000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-12, 1.0, size=n)
    eta = rng.uniform(0.1, 10.0, size=n)
    gate = stable_sigmoid(-0.5 * -np.log(p) / eta)
    return int(np.sum(gate > p ** (1.0 / (2.0 * eta)) * (1 + 1e-12)))


def delta_grid_table(K: int = 100, rho: float = 0.1, eta: float = 1.0,
                     deltas: Sequence[float] = DELTA_GRID, spread: float = 20.0) -> dict[str, list[float]]:
    """Cosines, overlap moments and noise norms over the delta grid (uniform nu)."""
    cont = ContaminationSpec.uniform(K, rho)
    rows: dict[str, list[float]] = {k: [] for k in (
        "delta", "cos_pg", "cos_dg", "cos_is", "ratio", "overlap", "overlap_normalized",
        "noise_is", "noise_pg", "noise_flat", "noise_random", "lemma2_ii_ratio")}
    f_random = np.random.default_rng(7).uniform(0.5, 2.0, size=K)
    for d in deltas:
        spec = delta_logits(K, d, spread=spread)
        pi = softmax(spec.z)
        gJ = true_gradient(spec)
        cpg = cosine_similarity(population_gradient(spec, cont, BanditEstimator.pg()).g, gJ)
        cdg = cosine_similarity(population_gradient(spec, cont, BanditEstimator.dg(eta)).g, gJ)
        cis = cosine_similarity(population_gradient(spec, cont, BanditEstimator.exact_is()).g, gJ)
        M = overlap_moment(pi, cont.nu, spec.y_star, eta)
        rows["delta"].append(d)
        rows["cos_pg"].append(cpg)
        rows["cos_dg"].append(cdg)
        rows["cos_is"].append(cis)
        rows["ratio"].append(cdg / cpg)
        rows["overlap"].append(M)
        rows["overlap_normalized"].append(M * K / np.sqrt((K - 1) * d))
        for key, est in (("noise_is", BanditEstimator.exact_is()), ("noise_pg", BanditEstimator.pg()),
                         ("noise_flat", BanditEstimator.reweighted(np.ones(K))),
                         ("noise_random", BanditEstimator.reweighted(f_random))):
            rows[key].append(float(np.linalg.norm(split_signal_noise(spec, cont, est)[1])))
        disfavored = [i for i in range(K) if i != spec.y_star]
        proj = max(abs(score_vector(pi, i) @ gJ) for i in disfavored)
        rows["lemma2_ii_ratio"].append(proj / (d * np.linalg.norm(gJ)))
    return rows


def theory_property_suite(K: int = 100, rho: float = 0.1, eta: float = 1.0, seed: int = 0,
                          spread: float = 20.0) -> list[CheckResult]:
    """Numerical consequences of the suppression lemma, the contamination
    propositions and softmax geometry. Every check runs; failures are reported."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    tab = delta_grid_table(K, rho, eta, spread=spread)
    deltas = tab["delta"]

    v = lemma1_violations(seed=seed)
    out.append(CheckResult("lemma1_gate_bound", v == 0, v, f"{v} violations of gate <= pi^(1/2eta) on 1e5 draws"))

    # gate symmetry and sigmoid reference are cheap; keep them alongside
    u, s = rng.normal(size=1000), rng.exponential(3.0, size=1000)
    sym = float(np.max(np.abs(gate_weight(u, s, eta) + gate_weight(-u, s, eta) - 1.0)))
    out.append(CheckResult("gate_symmetry", sym <= 1e-12, sym, f"max |w(u)+w(-u)-1| = {sym:.2e}"))

    # Lemma 2(i) on the delta-controlled family
    ok_i, worst = True, 0.0
    for d in deltas:
        spec = delta_logits(K, d, spread=spread)
        pi = softmax(spec.z)
        n_star = np.linalg.norm(score_vector(pi, spec.y_star))
        n_min = min(np.linalg.norm(score_vector(pi, i)) for i in range(K) if i != spec.y_star)
        ok_i &= n_star <= 2 * d and n_min >= 1 - 2 * d
        worst = max(worst, n_star / d)
    out.append(CheckResult("lemma2_i_norms", bool(ok_i), worst,
                           f"max ||phi(y*)||/delta = {worst:.3f}; disfavored norms >= 1-2delta"))

    C, ok = _heldout_constant(tab["lemma2_ii_ratio"])
    out.append(CheckResult("lemma2_ii_projection", ok, C,
                           "max|<phi(i),gradJ>|/(delta*||gradJ||) over grid = "
                           + ", ".join(f"{r:.3g}" for r in tab["lemma2_ii_ratio"])))

    worst_gate = 0.0
    for d in deltas:
        spec = delta_logits(K, d, spread=spread)
        pi = softmax(spec.z)
        coef = np.abs(arm_coefficients(pi, spec.y_star, BanditEstimator.dg(eta)))
        mask = np.arange(K) != spec.y_star
        worst_gate = max(worst_gate, float(np.max(coef[mask] / (0.5 * pi[mask] ** (1 / (2 * eta))))))
    out.append(CheckResult("dg_disfavored_suppression", worst_gate <= 1 + 1e-12, worst_gate,
                           f"max |coef| / (pi^(1/2eta)/2) = {worst_gate:.4f}"))

    cpg = tab["cos_pg"]
    out.append(CheckResult("prop1_pg_cos_decreasing", _strictly_monotone(cpg, increasing=False), cpg[-1],
                           "cos(g_PG, gradJ) = " + ", ".join(f"{c:.4f}" for c in cpg)))
    bound = [d / (rho * (1 - 1 / K) + d) for d in deltas]
    ratios = [c / b for c, b in zip(cpg, bound)]
    C, ok = _heldout_constant(ratios)
    out.append(CheckResult("prop1_pg_cos_bound", ok, C,
                           "cos/(delta/(rho(1-1/K)+delta)) = " + ", ".join(f"{r:.3g}" for r in ratios)
                           + f"; C fitted on coarse grid = {C:.3g}"))

    r = tab["ratio"]
    out.append(CheckResult("prop2_ratio_increasing", _strictly_monotone(r, increasing=True), r[-1],
                           "cos_DG/cos_PG = " + ", ".join(f"{x:.4f}" for x in r)))
    r3 = r[deltas.index(1e-3)] if 1e-3 in deltas else float("nan")
    r4 = r[deltas.index(1e-4)] if 1e-4 in deltas else float("nan")
    out.append(CheckResult("cor1_ratio_gt3_at_1e-3", r3 > 3, r3, f"ratio at delta=1e-3 is {r3:.4f}"))
    out.append(CheckResult("cor1_ratio_gt10_at_1e-4", r4 > 10, r4, f"ratio at delta=1e-4 is {r4:.4f}"))

    on = tab["overlap_normalized"]
    out.append(CheckResult("overlap_moment_scaling", all(0 < x <= 1 + 1e-12 for x in on), max(on),
                           "M*K/sqrt((K-1)delta) = " + ", ".join(f"{x:.4f}" for x in on)))

    worst_small = 0.0
    for _ in range(200):
        z = rng.normal(scale=3.0, size=K)
        pi = softmax(z)
        nu = rng.dirichlet(np.ones(K))
        e = rng.uniform(0.05, 0.5)
        worst_small = max(worst_small, overlap_moment(pi, nu, 0, e) / np.delete(pi, 0).sum())
    out.append(CheckResult("small_eta_overlap_le_delta", worst_small <= 1 + 1e-12, worst_small,
                           f"max M/delta for eta<=1/2 = {worst_small:.4f}"))

    worst_cm = 0.0
    for _ in range(50):
        spec = BanditLogits(rng.normal(scale=2.0, size=K), int(rng.integers(K)))
        g = population_gradient(spec, ContaminationSpec.uniform(K, 0.0), BanditEstimator.pg()).g
        worst_cm = max(worst_cm, float(np.max(np.abs(g - true_gradient(spec)))))
    out.append(CheckResult("change_of_measure_identity", worst_cm <= 1e-12, worst_cm,
                           f"max |g_PG(rho=0) - gradJ| = {worst_cm:.2e}"))

    worst_is = 0.0
    for _ in range(50):
        spec = BanditLogits(rng.normal(scale=3.0, size=K), int(rng.integers(K)))
        cont = ContaminationSpec(float(rng.uniform(0, 1)), rng.dirichlet(np.ones(K)))
        g = population_gradient(spec, cont, BanditEstimator.exact_is()).g
        worst_is = max(worst_is, float(np.max(np.abs(g - true_gradient(spec)))))
    out.append(CheckResult("exact_is_identity", worst_is <= 1e-10, worst_is,
                           f"max |g_IS - gradJ| = {worst_is:.2e}"))

    cis = tab["cos_is"]
    out.append(CheckResult("exact_is_population_cosine", all(abs(c - 1) <= 1e-10 for c in cis), min(cis),
                           "cos(g_IS, gradJ) = " + ", ".join(f"{c:.12f}" for c in cis)))
    for key in ("noise_is", "noise_pg", "noise_flat", "noise_random"):
        c_lo = min(tab[key]) / rho
        out.append(CheckResult(f"prop3_{key}_theta_rho", c_lo >= 0.1, c_lo,
                               "||noise||/rho = " + ", ".join(f"{x / rho:.3g}" for x in tab[key])))
    return out


def suite_records(results: Sequence[CheckResult], run_id: str = "theory") -> list[MetricRecord]:
    rows = []
    for r in results:
        rows.append(MetricRecord(run_id, 0, 0, r.name, "passed", float(r.passed)))
        rows.append(MetricRecord(run_id, 0, 0, r.name, "value", float(r.value)))
    return rows
