"""Desk-scale test problems with known truth and brute-force constant estimation.

Each shipped problem bundles a forward model, the planted solution, a
stability certificate (closed-form where the model is linear, sampled
otherwise) and a default search box.  The sampling oracle estimates every
certificate constant as an inflated maximum over random pairs plus a coarse
deterministic grid, and a fresh-seed re-verification pass guards against
unlucky sampling.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CertificationFailed, DegenerateModel
from .operators import ForwardModel, StabilityCertificate, as_vector, jacobian_matrix
from .recon import CompactBox, MeasurementOperator

INFLATION = 1.05
# Linear models have exactly zero Jacobian variation; the certificate still
# needs a strictly positive Lipschitz constant.
LIP_FLOOR = 1e-14
GRID_PER_AXIS = 4
REVERIFY_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class GalleryProblem:
    """A forward model with planted truth and certified constants."""

    id: str
    model: ForwardModel
    x_dagger: np.ndarray
    certificate: StabilityCertificate
    default_box: CompactBox
    y_exact: np.ndarray
    default_x0: np.ndarray
    notes: str
    linear: bool = False


@dataclass
class CertificateReport:
    """Result of re-checking a certificate on fresh sample pairs."""

    ok: bool
    violations: dict
    worst_ratio: dict


def _pair_arrays(box: CompactBox, samples: int, seed: int):
    """Random pairs in the box plus all pairs of a coarse grid."""
    rng = np.random.default_rng(seed)
    n = box.dim
    ext = box.upper - box.lower
    first = box.lower + rng.random((samples, n)) * ext
    second = box.lower + rng.random((samples, n)) * ext
    axes = [
        np.linspace(lo, up, GRID_PER_AXIS) if up > lo else np.array([lo])
        for lo, up in zip(box.lower, box.upper)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    gpts = np.column_stack([m.ravel() for m in mesh])
    gi, gj = np.triu_indices(gpts.shape[0], k=1)
    return (np.vstack([first, gpts[gi]]), np.vstack([second, gpts[gj]]))


def _chunk_maxima(model: ForwardModel, qmat: np.ndarray | None,
                  pa: np.ndarray, pb: np.ndarray, eps: float):
    exponent = (1.0 + eps) / 2.0
    jac_bound = 0.0
    lip = 0.0
    holder = 0.0
    fwd_lip = 0.0
    recon = 0.0
    for a, b in zip(pa, pb):
        d = float(np.linalg.norm(a - b))
        ja = jacobian_matrix(model, a)
        jb = jacobian_matrix(model, b)
        jac_bound = max(jac_bound,
                        float(np.linalg.norm(ja, 2)),
                        float(np.linalg.norm(jb, 2)))
        if d == 0.0:
            continue
        lip = max(lip, float(np.linalg.norm(ja - jb, 2)) / d)
        fa = as_vector(model.forward(a), model.dim_y, "F(x)")
        fb = as_vector(model.forward(b), model.dim_y, "F(x~)")
        fd = float(np.linalg.norm(fa - fb))
        if fd == 0.0:
            raise DegenerateModel(
                f"F({a}) = F({b}) with distinct arguments: no stability on this box"
            )
        holder = max(holder, (d / math.sqrt(2.0)) / fd**exponent)
        fwd_lip = max(fwd_lip, fd / d)
        qd = fd if qmat is None else float(np.linalg.norm(qmat @ (fa - fb)))
        if qd == 0.0:
            raise DegenerateModel(
                "measured data coincide for distinct arguments: "
                "the measurement map loses injectivity on this box"
            )
        recon = max(recon, 0.5 * d / qd)
    return jac_bound, lip, holder, fwd_lip, recon


def _scan_pairs(model, qmat, pa, pb, eps, threads):
    if threads <= 1:
        return _chunk_maxima(model, qmat, pa, pb, eps)
    chunk = max(1, math.ceil(pa.shape[0] / threads))
    bounds = [(s, min(s + chunk, pa.shape[0]))
              for s in range(0, pa.shape[0], chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda se: _chunk_maxima(model, qmat, pa[se[0]:se[1]],
                                     pb[se[0]:se[1]], eps),
            bounds,
        ))
    return tuple(max(p[i] for p in parts) for i in range(5))


def estimate_stability_constants(model: ForwardModel, box: CompactBox,
                                 eps: float, samples: int = 10000,
                                 seed: int = 0,
                                 measurement: MeasurementOperator | None = None,
                                 rho_prime: float | None = None,
                                 threads: int = 1) -> StabilityCertificate:
    """Sample-maximum estimate of every certificate constant, inflated by 5%.

    The measured-data constant uses the supplied measurement map (identity by
    default).  ``rho_prime`` defaults to the largest ball centered in the box
    that the box still contains, so the certificate is valid on that ball.
    """
    if samples < 10**4:
        raise ValueError("at least 10^4 sample pairs are required")
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    pa, pb = _pair_arrays(box, samples, seed)
    qmat = None if measurement is None else measurement.matrix
    jac_bound, lip, holder, fwd_lip, recon = _scan_pairs(
        model, qmat, pa, pb, eps, threads
    )
    if rho_prime is None:
        inradius = 0.5 * float(np.min(box.upper - box.lower))
        rho_prime = 0.5 * inradius**2 if inradius > 0 else model.radius_sq
    return StabilityCertificate(
        lip_deriv=INFLATION * max(lip, LIP_FLOOR),
        jac_bound=INFLATION * jac_bound,
        holder_const=INFLATION * holder,
        holder_eps=eps,
        domain_rho_prime=rho_prime,
        forward_lip=INFLATION * fwd_lip,
        recon_const=INFLATION * recon,
        q_norm=1.0 if measurement is None else measurement.operator_norm,
        provenance="oracle-estimated",
    )


def verify_certificate(model: ForwardModel, box: CompactBox,
                       cert: StabilityCertificate, samples: int = 10000,
                       seed: int = 1,
                       measurement: MeasurementOperator | None = None,
                       ) -> CertificateReport:
    """Check every certificate inequality on a fresh sample of pairs.

    A pair violates an inequality when its ratio exceeds 1 + 1e-12 (the slack
    absorbs rounding in certificates that hold with equality).
    """
    pa, pb = _pair_arrays(box, samples, seed)
    qmat = None if measurement is None else measurement.matrix
    exponent = (1.0 + cert.holder_eps) / 2.0
    counts = {"jac_bound": 0, "lip_deriv": 0, "holder": 0,
              "forward_lip": 0, "recon": 0}
    worst = {key: 0.0 for key in counts}

    def tally(key, ratio):
        worst[key] = max(worst[key], ratio)
        if ratio > 1.0 + REVERIFY_SLACK:
            counts[key] += 1

    for a, b in zip(pa, pb):
        d = float(np.linalg.norm(a - b))
        ja = jacobian_matrix(model, a)
        jb = jacobian_matrix(model, b)
        tally("jac_bound", float(np.linalg.norm(ja, 2)) / cert.jac_bound)
        tally("jac_bound", float(np.linalg.norm(jb, 2)) / cert.jac_bound)
        if d == 0.0:
            continue
        tally("lip_deriv",
              float(np.linalg.norm(ja - jb, 2)) / (cert.lip_deriv * d))
        fa = as_vector(model.forward(a), model.dim_y, "F(x)")
        fb = as_vector(model.forward(b), model.dim_y, "F(x~)")
        fd = float(np.linalg.norm(fa - fb))
        if fd == 0.0:
            raise DegenerateModel("F collapses a pair; stability fails")
        tally("holder",
              (d / math.sqrt(2.0)) / (cert.holder_const * fd**exponent))
        tally("forward_lip", fd / (cert.forward_lip * d))
        qd = fd if qmat is None else float(np.linalg.norm(qmat @ (fa - fb)))
        if qd == 0.0:
            raise DegenerateModel("measured data collapse a pair")
        tally("recon", d / (2.0 * cert.recon_const * qd))
    ok = all(v == 0 for v in counts.values())
    return CertificateReport(ok=ok, violations=counts, worst_ratio=worst)


def scalar_linear(a: float, x_dagger: float) -> GalleryProblem:
    """F(x) = a x on the line; every constant is available in closed form.

    The derivative is constant, so any positive Lipschitz constant is valid;
    1.0 keeps the guaranteed entry radius at a usable size.  The stability
    constant (1/(sqrt(2)|a|)) makes the inverse estimate hold with equality.
    """
    if a == 0:
        raise ValueError("a must be nonzero")
    a = float(a)
    x_dagger = float(x_dagger)

    model = ForwardModel(
        dim_x=1, dim_y=1,
        center=np.array([x_dagger]),
        radius_sq=a * a,
        forward=lambda x: a * x,
        jacobian_apply=lambda x, v: a * v,
        jacobian_adjoint_apply=lambda x, w: a * w,
    )
    cert = StabilityCertificate(
        lip_deriv=1.0,
        jac_bound=abs(a),
        holder_const=1.0 / (math.sqrt(2.0) * abs(a)),
        holder_eps=1.0,
        domain_rho_prime=a * a,
        forward_lip=abs(a),
        recon_const=1.0 / (2.0 * abs(a)),
        q_norm=1.0,
        provenance="user",
    )
    box = CompactBox(np.array([x_dagger - 0.5]), np.array([x_dagger + 0.5]))
    return GalleryProblem(
        id=f"scalar-linear-a{a:g}",
        model=model,
        x_dagger=np.array([x_dagger]),
        certificate=cert,
        default_box=box,
        y_exact=np.array([a * x_dagger]),
        default_x0=np.array([x_dagger - 0.5]),
        notes="closed-form linear map; residual contracts by exactly q per step",
        linear=True,
    )


def exp_decay(times, x_dagger, box: CompactBox | None = None,
              samples: int = 10000, seed: int = 101) -> GalleryProblem:
    """Two-parameter exponential decay F(x)_i = x1 * exp(-x2 * t_i)."""
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.shape[0] < 2 or np.unique(t).shape[0] < 2:
        raise ValueError("need at least two distinct sample times")
    x_dagger = as_vector(x_dagger, 2, "x_dagger")
    if np.any(x_dagger <= 0):
        raise ValueError("x_dagger must lie in the positive quadrant")
    if box is None:
        box = CompactBox(np.array([0.5, 0.5]), np.array([1.5, 1.5]))

    def forward(x):
        return x[0] * np.exp(-x[1] * t)

    def japply(x, v):
        e = np.exp(-x[1] * t)
        return e * (v[0] - x[0] * t * v[1])

    def jadj(x, w):
        e = np.exp(-x[1] * t)
        return np.array([float(np.dot(e, w)),
                         float(np.dot(-x[0] * t * e, w))])

    center = 0.5 * (box.lower + box.upper)
    inradius = 0.5 * float(np.min(box.upper - box.lower))
    model = ForwardModel(
        dim_x=2, dim_y=t.shape[0],
        center=center, radius_sq=0.5 * inradius**2,
        forward=forward, jacobian_apply=japply, jacobian_adjoint_apply=jadj,
    )
    cert = estimate_stability_constants(model, box, eps=1.0,
                                        samples=samples, seed=seed)
    report = verify_certificate(model, box, cert, samples=samples, seed=seed + 1)
    if not report.ok:
        raise CertificationFailed(
            f"exponential-decay certificate failed re-verification: {report.violations}"
        )
    # Default start close enough to the truth that the linearization-error
    # condition (omega = 2) verifiably holds along the run.
    return GalleryProblem(
        id="exp-decay",
        model=model,
        x_dagger=x_dagger,
        certificate=cert,
        default_box=box,
        y_exact=forward(x_dagger),
        default_x0=x_dagger + np.array([-0.1, 0.1]),
        notes=("genuinely nonlinear decay fit; satisfies the Jacobian and "
               "adjoint identities, used for composition and scan tests"),
    )


def quadratic_perturbation(mat, eta: float, box: CompactBox | None = None,
                           x_dagger=None, samples: int = 10000,
                           seed: int = 202) -> GalleryProblem:
    """F(x) = A x + eta * (x ** 2), componentwise square.

    With a well-conditioned A and moderate eta the map stays Lipschitz-stable
    on the default box, which is what the convergence-rate checks need.
    Raises :class:`CertificationFailed` when eta is too large for the box.
    """
    a_mat = np.atleast_2d(np.asarray(mat, dtype=float))
    n = a_mat.shape[0]
    if a_mat.shape != (n, n):
        raise ValueError("A must be square")
    smin = float(np.linalg.svd(a_mat, compute_uv=False)[-1])
    if smin <= 0:
        raise ValueError("A must be invertible")
    if box is None:
        box = CompactBox(np.full(n, -0.5), np.full(n, 0.5))
    if x_dagger is None:
        signs = np.array([(-1.0) ** i for i in range(n)])
        x_dagger = 0.25 * signs * (1.0 - 0.2 * np.arange(n))
    x_dagger = as_vector(x_dagger, n, "x_dagger")

    def forward(x):
        return a_mat @ x + eta * x * x

    def japply(x, v):
        return a_mat @ v + 2.0 * eta * x * v

    def jadj(x, w):
        return a_mat.T @ w + 2.0 * eta * x * w

    center = 0.5 * (box.lower + box.upper)
    inradius = 0.5 * float(np.min(box.upper - box.lower))
    model = ForwardModel(
        dim_x=n, dim_y=n,
        center=center, radius_sq=0.5 * inradius**2,
        forward=forward, jacobian_apply=japply, jacobian_adjoint_apply=jadj,
    )
    try:
        cert = estimate_stability_constants(model, box, eps=1.0,
                                            samples=samples, seed=seed)
        report = verify_certificate(model, box, cert, samples=samples,
                                    seed=seed + 1)
    except DegenerateModel as exc:
        raise CertificationFailed(
            f"eta = {eta} destroys injectivity on the box: {exc}"
        ) from exc
    if not report.ok:
        raise CertificationFailed(
            f"quadratic certificate failed re-verification: {report.violations}"
        )
    return GalleryProblem(
        id=f"quadratic-{n}d",
        model=model,
        x_dagger=x_dagger,
        certificate=cert,
        default_box=box,
        y_exact=forward(x_dagger),
        default_x0=x_dagger + 0.06 * np.array([(-1.0) ** i for i in range(n)]),
        notes=("tunable nonlinearity with Lipschitz-stable inverse; the main "
               "vehicle for the convergence-rate and noisy-data guarantees"),
    )


def sabotaged_adjoint_fixture() -> GalleryProblem:
    """Fault-injection fixture: the adjoint action is scaled by 2%.

    Not part of the shipped gallery; exists so the verification command can
    demonstrate that a broken adjoint is caught.
    """
    good = exp_decay((0.0, 1.0, 2.0), (1.2, 0.7))
    broken_model = ForwardModel(
        dim_x=good.model.dim_x,
        dim_y=good.model.dim_y,
        center=good.model.center,
        radius_sq=good.model.radius_sq,
        forward=good.model.forward,
        jacobian_apply=good.model.jacobian_apply,
        jacobian_adjoint_apply=lambda x, w: 1.02 * good.model.jacobian_adjoint_apply(x, w),
    )
    return GalleryProblem(
        id="sabotaged-adjoint",
        model=broken_model,
        x_dagger=good.x_dagger,
        certificate=good.certificate,
        default_box=good.default_box,
        y_exact=good.y_exact,
        default_x0=good.default_x0,
        notes="deliberately inconsistent adjoint; for fault-injection tests only",
    )


_BUILDERS = {
    "scalar-linear": lambda: scalar_linear(2.0, 0.5),
    "scalar-linear-unit": lambda: scalar_linear(1.0, 0.5),
    "exp-decay": lambda: exp_decay((0.0, 1.0, 2.0), (1.2, 0.7)),
    "exp-decay-2pt": lambda: exp_decay((0.0, 1.0), (0.8, 1.2)),
    "quadratic-2d": lambda: quadratic_perturbation(np.eye(2), 0.25),
    "quadratic-3d": lambda: quadratic_perturbation(np.eye(3), 0.2),
}

_FIXTURE_BUILDERS = {
    "sabotaged-adjoint": sabotaged_adjoint_fixture,
}

_CACHE: dict[str, GalleryProblem] = {}


def gallery_ids() -> list[str]:
    return list(_BUILDERS)


def get_problem(problem_id: str, fixtures: bool = True) -> GalleryProblem:
    """Problem registry lookup; builds lazily and caches."""
    if problem_id not in _CACHE:
        if problem_id in _BUILDERS:
            prob = _BUILDERS[problem_id]()
        elif fixtures and problem_id in _FIXTURE_BUILDERS:
            prob = _FIXTURE_BUILDERS[problem_id]()
        else:
            known = sorted([*_BUILDERS, *(_FIXTURE_BUILDERS if fixtures else {})])
            raise KeyError(f"unknown problem '{problem_id}'; known: {known}")
        if prob.id != problem_id:
            prob = dataclasses.replace(prob, id=problem_id)
        _CACHE[problem_id] = prob
    return _CACHE[problem_id]
