"""Iteration drivers and the convergence-theory constant calculators.

``run_exact`` and ``run_noisy`` drive the Levenberg-Marquardt update from
:mod:`lmrecon.step`; every step's diagnostics land in an
:class:`IterationTrace`.  The constant calculators evaluate, literally, the
formulas that the convergence guarantees are stated in terms of, and each run
carries a hypothesis report so that rate checks can distinguish "the theory
applies and must hold" from "exploratory run, observe only".

A plain Landweber driver is included as the comparison baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BudgetBeforeDiscrepancy,
    ConditionViolated,
    ConfigInvalid,
    DivergenceDetected,
    DomainViolation,
    RootInfeasible,
)
from .operators import (
    ForwardModel,
    StabilityCertificate,
    apply_forward,
    as_vector,
    check_domain,
    estimate_jacobian_norm,
    require_in_domain,
)
from .step import StepDiagnostics, lm_step

TERMINALS = (
    "budget_exhausted",
    "zero_residual",
    "discrepancy_stop",
    "root_infeasible",
    "domain_violation",
    "target_reached",
)

STOP_MODES = ("fixed_budget", "target_error", "discrepancy")

# Slack used when confirming identities that hold exactly in the analysis but
# are evaluated in floating point.
_REL_SLACK = 1e-12

# Residuals below this multiple of machine epsilon (times the data scale) are
# dominated by rounding noise in y - F(x); the iteration stops there.
_FLOOR_EPS = 100.0 * np.finfo(float).eps


@dataclass(frozen=True)
class SolverConfig:
    """Run parameters: contraction factor q, stopping rule, budgets."""

    q: float
    max_iters: int
    tau: float | None = None
    delta: float = 0.0
    tol_alpha: float = 1e-10
    stop_mode: str = "fixed_budget"
    target_gamma: float | None = None
    domain_mode: str = "error"

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ConfigInvalid(f"q = {self.q} must lie in the open interval (0, 1)")
        if self.max_iters < 0:
            raise ConfigInvalid("max_iters must be >= 0")
        if not self.tol_alpha > 0:
            raise ConfigInvalid("tol_alpha must be positive")
        if self.stop_mode not in STOP_MODES:
            raise ConfigInvalid(f"stop_mode must be one of {STOP_MODES}")
        if self.stop_mode == "discrepancy":
            if self.tau is None or not self.tau > 1.0:
                raise ConfigInvalid("discrepancy stopping requires tau > 1")
            if self.delta < 0:
                raise ConfigInvalid("delta must be >= 0")
        if self.stop_mode == "target_error":
            if self.target_gamma is None or not self.target_gamma > 0:
                raise ConfigInvalid("target_error stopping requires target_gamma > 0")
        if self.domain_mode not in ("error", "warn", "off"):
            raise ConfigInvalid("domain_mode must be 'error', 'warn' or 'off'")


@dataclass(frozen=True)
class TheoryConstantsExact:
    """Constants of the exact-data convergence guarantee."""

    rho: float
    c: float
    q_condition_ok: bool
    rho_lt_rho_prime: bool
    cert_provenance: str = "user"


@dataclass(frozen=True)
class TheoryConstantsNoisy:
    """Constants of the noisy-data guarantee (discrepancy stopping)."""

    rho: float
    R: float
    kstar_bound: int | None
    c_prime_coeff: float
    rho_lt_rho_prime: bool
    cert_provenance: str = "user"
    nu_bound: float | None = None


@dataclass
class HypothesisReport:
    """Which theorem hypotheses verifiably hold for a given run."""

    q_condition_ok: bool | None = None
    rho_lt_rho_prime: bool | None = None
    x0_condition_ok: bool | None = None
    r_positive: bool | None = None
    nu_additional_ok: bool | None = None
    cert_provenance: str | None = None
    armed: bool = False

    def as_dict(self) -> dict:
        return {
            "q_condition_ok": self.q_condition_ok,
            "rho_lt_rho_prime": self.rho_lt_rho_prime,
            "x0_condition_ok": self.x0_condition_ok,
            "r_positive": self.r_positive,
            "nu_additional_ok": self.nu_additional_ok,
            "cert_provenance": self.cert_provenance,
            "armed": self.armed,
        }


@dataclass
class TraceRecord:
    """One trace row; row 0 is the initial state with alpha unset."""

    k: int
    alpha: float | None
    residual: float
    gamma: float | None
    step_norm: float | None
    mdp_prime_rel_err: float | None


@dataclass
class IterationTrace:
    """Complete record of one solver run."""

    records: list[TraceRecord]
    terminal: str
    k_star: int | None = None
    x_initial: np.ndarray | None = None
    x_final: np.ndarray | None = None
    step_diagnostics: list[StepDiagnostics] = field(default_factory=list)
    hypothesis: HypothesisReport | None = None
    gamma_monotone: bool | None = None
    error_monotonicity_ok: bool | None = None
    omega_ok: bool | None = None
    warnings: list[str] = field(default_factory=list)
    recon: object | None = None
    iterates: list[np.ndarray] | None = None

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    def residuals(self) -> np.ndarray:
        return np.array([rec.residual for rec in self.records])

    def gammas(self) -> np.ndarray:
        return np.array(
            [rec.gamma if rec.gamma is not None else np.nan for rec in self.records]
        )


def compute_constants_exact(cert: StabilityCertificate, q: float,
                            strict: bool = True) -> TheoryConstantsExact:
    """Evaluate the exact-data guarantee constants for the given certificate.

    With ``strict`` (the default) a failed hypothesis raises
    :class:`ConditionViolated`; otherwise the flags record the failure and the
    caller is expected to treat any rate claims as observations only.
    """
    if not 0.0 < q < 1.0:
        raise ConfigInvalid("q must lie in (0, 1)")
    lip, jac, cf, eps = (cert.lip_deriv, cert.jac_bound,
                         cert.holder_const, cert.holder_eps)
    q_ok = q * (1.0 - q) < 2.0 * jac**2 * cf ** (4.0 / (1.0 + eps))
    rho = 1.0 / (2.0 * jac**2) * (q / (2.0 * lip * cf**2)) ** (2.0 / eps)
    c = q * (1.0 - q) / (2.0 * jac**2 * cf ** (4.0 / (1.0 + eps)))
    rho_ok = rho < cert.domain_rho_prime
    if strict:
        if not q_ok:
            raise ConditionViolated(
                f"q(1-q) = {q * (1 - q):.6g} must be < "
                f"{2.0 * jac**2 * cf ** (4.0 / (1.0 + eps)):.6g}; adjust q"
            )
        if not rho_ok:
            raise ConditionViolated(
                f"rho = {rho:.6g} must be < rho' = {cert.domain_rho_prime:.6g}; "
                "adjust q or enlarge the admissible ball"
            )
    return TheoryConstantsExact(
        rho=rho, c=c, q_condition_ok=q_ok, rho_lt_rho_prime=rho_ok,
        cert_provenance=cert.provenance,
    )


def compute_constants_noisy(cert: StabilityCertificate, q: float, tau: float,
                            delta: float | None = None,
                            strict: bool = True) -> TheoryConstantsNoisy:
    """Evaluate the noisy-data guarantee constants; errors if R <= 0."""
    if not 0.0 < q < 1.0:
        raise ConfigInvalid("q must lie in (0, 1)")
    if not tau > 1.0:
        raise ConfigInvalid("tau must be > 1")
    lip, jac, cf, eps = (cert.lip_deriv, cert.jac_bound,
                         cert.holder_const, cert.holder_eps)
    big_r = 0.75 - (1.0 / q + 0.25) / tau
    rho = 1.0 / (2.0 * jac**2) * (q / (4.0 * lip * cf**2)) ** (2.0 / eps)
    rho_ok = rho < cert.domain_rho_prime
    if strict:
        if not big_r > 0:
            raise ConditionViolated(
                f"R = 3/4 - (1/q + 1/4)/tau = {big_r:.6g} must be positive; "
                "increase tau"
            )
        if not rho_ok:
            raise ConditionViolated(
                f"rho = {rho:.6g} must be < rho' = {cert.domain_rho_prime:.6g}"
            )
    kstar_bound = None
    if delta is not None and delta > 0 and big_r > 0:
        kstar_bound = int(math.floor(
            jac**2 * rho / (q * (1.0 - q) * big_r * (tau * delta) ** 2)
        ))
    return TheoryConstantsNoisy(
        rho=rho, R=big_r, kstar_bound=kstar_bound,
        c_prime_coeff=q * (1.0 - q) * tau**2 * big_r / jac**2,
        rho_lt_rho_prime=rho_ok, cert_provenance=cert.provenance,
        nu_bound=nu_additional_bound(cert) if eps == 1.0 else None,
    )


def rate_bound(k: int, tc: TheoryConstantsExact, eps: float) -> float:
    """Guaranteed upper bound on gamma_k = 0.5 ||x_k - x_truth||^2."""
    if eps == 1.0:
        return tc.rho * (1.0 - tc.c) ** k
    p = (1.0 - eps) / (1.0 + eps)
    return (tc.c * k * p + tc.rho ** (-p)) ** (-1.0 / p)


def iterations_for_accuracy(target_gamma: float, tc: TheoryConstantsExact,
                            eps: float) -> int:
    """Smallest M with ``rate_bound(M) <= target_gamma``."""
    if not target_gamma > 0:
        raise ValueError("target_gamma must be positive")
    if target_gamma >= tc.rho:
        return 0
    if eps == 1.0:
        m = math.ceil(math.log(target_gamma / tc.rho) / math.log(1.0 - tc.c))
    else:
        p = (1.0 - eps) / (1.0 + eps)
        m = math.ceil((target_gamma ** (-p) - tc.rho ** (-p)) / (tc.c * p))
    m = max(m, 0)
    while rate_bound(m, tc, eps) > target_gamma:
        m += 1
    while m > 0 and rate_bound(m - 1, tc, eps) <= target_gamma:
        m -= 1
    return m


def kstar_upper_bound(tc: TheoryConstantsNoisy, cert: StabilityCertificate,
                      q: float, tau: float, delta: float) -> int:
    """floor( Lhat^2 rho / (q (1-q) R (tau delta)^2) )."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not tc.R > 0:
        raise ConditionViolated("R must be positive for the stopping-index bound")
    return int(math.floor(
        cert.jac_bound**2 * tc.rho / (q * (1.0 - q) * tc.R * (tau * delta) ** 2)
    ))


def nu_additional_bound(cert: StabilityCertificate) -> float:
    """Upper limit on q for the logarithmic stopping estimate."""
    s = 2.0 * math.sqrt(2.0) * cert.jac_bound * cert.holder_const
    return s / (1.0 + s)


def tangential_cone_eta(cert: StabilityCertificate,
                        rho_prime: float | None = None) -> float:
    """Linearization-error factor implied by the stability certificate.

    On a ball with parameter ``rho_prime`` the linearization error is bounded
    by this multiple of the data difference; below 1 it yields the classical
    tangential cone condition.  Shrinks with the ball:
    eta = (L/2) * (2 sqrt(2 rho'))^(2 eps/(1+eps)) * (sqrt(2) C_F)^(2/(1+eps)).
    """
    if rho_prime is None:
        rho_prime = cert.domain_rho_prime
    eps = cert.holder_eps
    diam = 2.0 * math.sqrt(2.0 * rho_prime)
    return (cert.lip_deriv / 2.0
            * diam ** (2.0 * eps / (1.0 + eps))
            * (math.sqrt(2.0) * cert.holder_const) ** (2.0 / (1.0 + eps)))


def qtilde(q: float, cert: StabilityCertificate, initial_error: float) -> float:
    """Effective residual contraction factor under the extra smallness condition.

    ``initial_error`` is ``||x0 - x_truth||``.  Requires the Lipschitz case
    (eps = 1), q below :func:`nu_additional_bound`, and the initial error small
    enough that the denominator stays positive.
    """
    if cert.holder_eps != 1.0:
        raise ConditionViolated("the logarithmic stopping estimate needs eps = 1")
    if not 0.0 < q < nu_additional_bound(cert):
        raise ConditionViolated(
            f"q = {q} violates q < {nu_additional_bound(cert):.6g}"
        )
    s = cert.lip_deriv * cert.holder_const / math.sqrt(2.0) * initial_error
    if not s < 1.0:
        raise ConditionViolated(
            "initial error too large: L*C_F/sqrt(2) * e0 must be < 1"
        )
    return (q + s) / (1.0 - s)


def kstar_log_estimate(q_tilde: float, r0_norm: float, tau: float,
                       delta: float) -> int:
    """ceil(1 + log(||r0|| / (tau delta)) / log(1 / q_tilde))."""
    if not 0.0 < q_tilde < 1.0:
        raise ConditionViolated("q_tilde must lie in (0, 1) for a finite estimate")
    if r0_norm <= tau * delta:
        return 0
    return int(math.ceil(
        1.0 + math.log(r0_norm / (tau * delta)) / math.log(1.0 / q_tilde)
    ))


def _omega_margin(model: ForwardModel, x, x_dagger, y_obs, q: float):
    """Ratio q*||r|| / ||r - J(x)(x_dagger - x)|| at the current iterate."""
    r = y_obs - apply_forward(model, x, check=False)
    jd = model.jacobian_apply(x, x_dagger - x)
    lhs = float(np.linalg.norm(r - jd))
    rnorm = float(np.linalg.norm(r))
    if lhs == 0.0:
        return math.inf, lhs, rnorm
    return q * rnorm / lhs, lhs, rnorm


def _check_x0(model: ForwardModel, x0, cfg: SolverConfig, trace_warnings):
    if cfg.domain_mode == "error":
        require_in_domain(model, x0, "x0")
    elif cfg.domain_mode == "warn" and not check_domain(model, x0):
        trace_warnings.append("x0 lies outside the admissible ball")


def _run_lm(model: ForwardModel, x_dagger, y_obs, x0, cfg: SolverConfig,
            rho: float | None, omega: float | None,
            hypothesis: HypothesisReport,
            discrepancy_threshold: float | None,
            record_iterates: bool = False) -> IterationTrace:
    """Shared LM loop for the exact and noisy drivers."""
    x = as_vector(x0, model.dim_x, "x0")
    y_obs = as_vector(y_obs, model.dim_y, "y_obs")
    truth = x_dagger is not None
    if truth:
        x_dagger = as_vector(x_dagger, model.dim_x, "x_dagger")

    trace = IterationTrace(records=[], terminal="budget_exhausted",
                           hypothesis=hypothesis, x_initial=x.copy(),
                           iterates=[x.copy()] if record_iterates else None)
    _check_x0(model, x, cfg, trace.warnings)

    gamma = 0.5 * float(np.sum((x - x_dagger) ** 2)) if truth else None
    if truth and rho is not None:
        ok = gamma <= rho
        hypothesis.x0_condition_ok = ok
        if not ok:
            trace.warnings.append(
                f"entry condition fails: gamma_0 = {gamma:.6g} > rho = {rho:.6g}"
            )
        hypothesis.armed = hypothesis.armed and ok
    if truth:
        trace.gamma_monotone = True
        trace.error_monotonicity_ok = True
        trace.omega_ok = True

    residual = float(np.linalg.norm(y_obs - apply_forward(model, x, check=False)))
    trace.records.append(TraceRecord(0, None, residual, gamma, None, None))
    floor = _FLOOR_EPS * (1.0 + float(np.linalg.norm(y_obs)))

    k = 0
    while True:
        if discrepancy_threshold is not None and residual <= discrepancy_threshold:
            trace.terminal = "discrepancy_stop"
            trace.k_star = k
            break
        if residual <= floor:
            trace.terminal = "zero_residual"
            if residual != 0.0:
                trace.warnings.append(
                    f"residual {residual:.3e} at the machine-precision floor; "
                    "treated as converged"
                )
            break
        if (cfg.stop_mode == "target_error" and truth
                and gamma <= cfg.target_gamma):
            trace.terminal = "target_reached"
            break
        if k >= cfg.max_iters:
            trace.terminal = "budget_exhausted"
            if discrepancy_threshold is not None:
                trace.warnings.append(
                    "iteration budget exhausted before the discrepancy criterion"
                )
            break

        try:
            x_next, diag = lm_step(model, x, y_obs, cfg.q,
                                   tol_alpha=cfg.tol_alpha,
                                   domain_mode=cfg.domain_mode)
        except RootInfeasible as exc:
            trace.terminal = "root_infeasible"
            trace.warnings.append(str(exc))
            break
        except DomainViolation as exc:
            trace.terminal = "domain_violation"
            trace.warnings.append(str(exc))
            break

        if truth and omega is not None:
            margin, lhs, rnorm = _omega_margin(model, x, x_dagger, y_obs, cfg.q)
            diag.omega_margin = margin
            if lhs > (cfg.q / omega) * rnorm * (1.0 + _REL_SLACK):
                trace.omega_ok = False

        step_norm = float(np.linalg.norm(x_next - x))
        residual_next = float(
            np.linalg.norm(y_obs - apply_forward(model, x_next, check=False))
        )
        gamma_next = (0.5 * float(np.sum((x_next - x_dagger) ** 2))
                      if truth else None)

        trace.records.append(TraceRecord(
            k + 1, diag.alpha, residual_next, gamma_next, step_norm,
            diag.mdp_prime_rel_err,
        ))
        trace.step_diagnostics.append(diag)
        if record_iterates:
            trace.iterates.append(x_next.copy())

        if truth:
            if gamma_next > gamma + _REL_SLACK * max(gamma, 1.0):
                trace.gamma_monotone = False
                trace.warnings.append(
                    f"gamma increased at step {k}: {gamma:.6g} -> {gamma_next:.6g}"
                )
            decrease = 2.0 * gamma - 2.0 * gamma_next
            if not decrease > step_norm**2 - 1e-12:
                trace.error_monotonicity_ok = False
                trace.warnings.append(
                    f"error-monotonicity inequality failed at step {k}"
                )

        x, residual, gamma = x_next, residual_next, gamma_next
        k += 1

    trace.x_final = x.copy()
    return trace


def run_exact(model: ForwardModel, x_dagger, y, x0, cfg: SolverConfig,
              tc: TheoryConstantsExact | None = None,
              record_iterates: bool = False) -> IterationTrace:
    """Drive the LM iteration on exact data until budget, target, or x = x_truth.

    When the ground truth is supplied, gamma_k is recorded per row, the
    omega-condition is verified per step (with omega = 2, as in the exact-data
    analysis) and monotonicity violations are flagged on the trace.
    """
    if cfg.stop_mode == "discrepancy":
        raise ConfigInvalid("use run_noisy for discrepancy stopping")
    if cfg.stop_mode == "target_error" and x_dagger is None:
        raise ConfigInvalid("target_error stopping requires a ground truth")
    hyp = HypothesisReport()
    rho = None
    if tc is not None:
        hyp.q_condition_ok = tc.q_condition_ok
        hyp.rho_lt_rho_prime = tc.rho_lt_rho_prime
        hyp.cert_provenance = tc.cert_provenance
        hyp.armed = (tc.q_condition_ok and tc.rho_lt_rho_prime
                     and tc.cert_provenance == "oracle-estimated")
        rho = tc.rho
    return _run_lm(model, x_dagger, y, x0, cfg, rho, omega=2.0,
                   hypothesis=hyp, discrepancy_threshold=None,
                   record_iterates=record_iterates)


def run_noisy(model: ForwardModel, x_dagger, y_delta, x0, cfg: SolverConfig,
              tc: TheoryConstantsNoisy | None = None,
              record_iterates: bool = False,
              strict_budget: bool = False) -> IterationTrace:
    """Drive the LM iteration on noisy data with discrepancy stopping.

    Stops at the first iterate whose residual is <= tau * delta and records
    that index as ``k_star`` (0 is allowed).  If the budget runs out first the
    trace is still returned with terminal status ``budget_exhausted``; with
    ``strict_budget`` that case raises :class:`BudgetBeforeDiscrepancy`
    instead.  ``delta = 0`` degenerates to exact data with stopping
    threshold 0.
    """
    if cfg.stop_mode != "discrepancy":
        raise ConfigInvalid("run_noisy requires stop_mode = 'discrepancy'")
    hyp = HypothesisReport()
    rho = None
    big_r = 0.75 - (1.0 / cfg.q + 0.25) / cfg.tau
    hyp.r_positive = big_r > 0
    if tc is not None:
        hyp.rho_lt_rho_prime = tc.rho_lt_rho_prime
        hyp.cert_provenance = tc.cert_provenance
        if tc.nu_bound is not None:
            hyp.nu_additional_ok = cfg.q < tc.nu_bound
        hyp.armed = (tc.R > 0 and tc.rho_lt_rho_prime
                     and tc.cert_provenance == "oracle-estimated")
        rho = tc.rho
    omega = 1.0 / (1.0 - big_r) if big_r > 0 else None
    trace = _run_lm(model, x_dagger, y_delta, x0, cfg, rho, omega=omega,
                    hypothesis=hyp,
                    discrepancy_threshold=cfg.tau * cfg.delta,
                    record_iterates=record_iterates)
    if strict_budget and trace.terminal == "budget_exhausted":
        raise BudgetBeforeDiscrepancy(
            f"no iterate reached the discrepancy threshold within "
            f"{cfg.max_iters} steps"
        )
    return trace


def landweber_run(model: ForwardModel, y_obs, x0, step_scale: float,
                  cfg: SolverConfig, x_dagger=None) -> IterationTrace:
    """Gradient-descent baseline: x <- x + step_scale * J^T (y - F(x)).

    Produces a trace in the same format as the LM drivers (alpha and the
    linearized-residual column stay unset).  Raises
    :class:`DivergenceDetected` if the residual grows tenfold over its running
    minimum, and :class:`ConditionViolated` if the step size violates
    ``step_scale * ||J||^2 <= 1`` at the starting point.
    """
    x = as_vector(x0, model.dim_x, "x0")
    y_obs = as_vector(y_obs, model.dim_y, "y_obs")
    truth = x_dagger is not None
    if truth:
        x_dagger = as_vector(x_dagger, model.dim_x, "x_dagger")
    jn = estimate_jacobian_norm(model, x, iters=200, check=False)
    if step_scale * jn**2 > 1.0 + 1e-9:
        raise ConditionViolated(
            f"step_scale * ||J||^2 = {step_scale * jn**2:.6g} exceeds 1"
        )

    trace = IterationTrace(records=[], terminal="budget_exhausted",
                           hypothesis=None, x_initial=x.copy())
    _check_x0(model, x, cfg, trace.warnings)
    threshold = (cfg.tau * cfg.delta if cfg.stop_mode == "discrepancy" else None)

    gamma = 0.5 * float(np.sum((x - x_dagger) ** 2)) if truth else None
    residual = float(np.linalg.norm(y_obs - apply_forward(model, x, check=False)))
    trace.records.append(TraceRecord(0, None, residual, gamma, None, None))
    min_residual = residual
    floor = _FLOOR_EPS * (1.0 + float(np.linalg.norm(y_obs)))

    k = 0
    while True:
        if threshold is not None and residual <= threshold:
            trace.terminal = "discrepancy_stop"
            trace.k_star = k
            break
        if residual <= floor:
            trace.terminal = "zero_residual"
            break
        if k >= cfg.max_iters:
            trace.terminal = "budget_exhausted"
            break
        if residual > 10.0 * min_residual:
            raise DivergenceDetected(
                f"residual {residual:.6g} grew 10x over its minimum "
                f"{min_residual:.6g} at step {k}"
            )
        r = y_obs - apply_forward(model, x, check=False)
        g = as_vector(model.jacobian_adjoint_apply(x, r), model.dim_x, "J* r")
        x_next = x + step_scale * g
        if cfg.domain_mode == "error":
            require_in_domain(model, x_next, "Landweber update")
        residual_next = float(
            np.linalg.norm(y_obs - apply_forward(model, x_next, check=False))
        )
        gamma_next = (0.5 * float(np.sum((x_next - x_dagger) ** 2))
                      if truth else None)
        trace.records.append(TraceRecord(
            k + 1, None, residual_next, gamma_next,
            float(np.linalg.norm(x_next - x)), None,
        ))
        x, residual, gamma = x_next, residual_next, gamma_next
        min_residual = min(min_residual, residual)
        k += 1

    trace.x_final = x.copy()
    return trace
