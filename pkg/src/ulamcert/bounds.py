"""Hypothesis constants, Gronwall bounds and stability certificates for the
Bernoulli and Riccati problems.

The certified chain is

    M   sup of |p| (Bernoulli) or |q| (Riccati) over the interval,
    L   sup of the symbolic d/dz of the nonlinear term over a user-declared
        z-range (a global Lipschitz constant generally does not exist, so the
        certificate is explicitly range-restricted and invalidates itself
        when any trajectory leaves the range),
    c   = (b - a) * exp((M + L) (b - a)),

and the empirical side measures sup|y - z| for each ensemble member against
c * eps.  Sup estimates come from a dense grid scan plus golden-section
refinement around the argmax, inflated by a 1e-9 safety factor so that the
reported value can only over-estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import exprdsl
from .exprdsl import Expression, compile_fn, differentiate, parse, to_string
from .odesolve import (
    BernoulliProblem,
    Interval,
    RiccatiProblem,
    SolverConfig,
    solve_exact,
    solve_perturbed_many,
)
from .perturb import PerturbationSpec, ensemble, ensemble_manifest

SAFETY = 1.0 + 1e-9
HOLDS_SLACK = 1.0 + 1e-9
L_CLAMP = 1e-300

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class CertificateUnusableError(RuntimeError):
    """The bound constant overflowed or a hypothesis could not be estimated."""


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupEstimate:
    value: float
    grid_points: int
    refinement_passes: int


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    method: str  # "symbolic_derivative_sup" | "user_supplied"
    z_range: tuple[float, float]
    clamped: bool = False


def _golden_max(f, lo: float, hi: float, iters: int = 60):
    """Golden-section search for a maximum of f on [lo, hi]."""
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_PHI * (hi - lo)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _scan_abs(fn, e: Expression, xs: np.ndarray, **fixed) -> np.ndarray:
    vals = np.abs(fn(x=xs, **fixed))
    vals = np.broadcast_to(vals, xs.shape)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        point = {"x": float(xs[bad])}
        point.update({k: float(v) for k, v in fixed.items()})
        exprdsl.evaluate(e, point)  # raises DomainError naming the node
        raise EstimationError("non-finite value during sup scan")
    return vals


def estimate_sup(f: Expression, interval: Interval, grid_n: int = 2048) -> SupEstimate:
    """Sup of |f| over the interval: grid scan plus two golden refinement passes."""
    if grid_n < 100:
        raise ValueError("grid_n must be >= 100")
    fn = compile_fn(f)
    xs = np.linspace(interval.a, interval.b, grid_n)
    vals = _scan_abs(fn, f, xs)
    k = int(np.argmax(vals))
    best = float(vals[k])
    lo = float(xs[max(k - 1, 0)])
    hi = float(xs[min(k + 1, grid_n - 1)])

    def objective(x):
        return float(np.abs(fn(x=x)))

    passes = 2
    for _ in range(passes):
        x_star, v_star = _golden_max(objective, lo, hi)
        best = max(best, v_star)
        width = (hi - lo) * 0.1
        lo = max(interval.a, x_star - 0.5 * width)
        hi = min(interval.b, x_star + 0.5 * width)
    return SupEstimate(best * SAFETY, grid_n, passes)


def _lipschitz_from_power(
    coeff: Expression, n: float, interval: Interval, z_range, grid_n: int = 512
) -> LipschitzEstimate:
    """Sup of |d/dz [coeff(x) * z^n]| over interval x z_range via the symbolic
    derivative, with one golden refinement pass along each axis."""
    z_lo, z_hi = float(z_range[0]), float(z_range[1])
    if not z_lo < z_hi:
        raise ValueError("z_range must be an increasing pair")
    if n != int(n) and z_lo <= 0.0:
        raise ValueError("z_range must be positive for non-integer exponents")
    combined = parse(f"({to_string(coeff)}) * z^({repr(float(n))})", ("x", "z"))
    deriv = differentiate(combined, "z")
    fn = compile_fn(deriv)

    xs = np.linspace(interval.a, interval.b, grid_n)
    zs = np.linspace(z_lo, z_hi, grid_n)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    vals = np.abs(fn(x=X, z=Z))
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        exprdsl.evaluate(deriv, {"x": float(X[tuple(bad)]), "z": float(Z[tuple(bad)])})
        raise EstimationError("non-finite value during Lipschitz scan")
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    best = float(vals[i, j])
    x_star, z_star = float(xs[i]), float(zs[j])

    # refinement passes: one golden sweep per axis around the grid argmax
    x_lo, x_hi = float(xs[max(i - 1, 0)]), float(xs[min(i + 1, grid_n - 1)])
    x_star, v = _golden_max(lambda x: float(np.abs(fn(x=x, z=z_star))), x_lo, x_hi)
    best = max(best, v)
    zlo_b, zhi_b = float(zs[max(j - 1, 0)]), float(zs[min(j + 1, grid_n - 1)])
    _, v = _golden_max(lambda z: float(np.abs(fn(x=x_star, z=z))), zlo_b, zhi_b)
    best = max(best, v)

    value = best * SAFETY
    clamped = False
    if value == 0.0:
        value = L_CLAMP
        clamped = True
    return LipschitzEstimate(value, "symbolic_derivative_sup", (z_lo, z_hi), clamped)


def estimate_lipschitz_bernoulli(
    q: Expression, n: float, interval: Interval, z_range
) -> LipschitzEstimate:
    """Lipschitz constant of z -> q(x) z^n over the declared z-range."""
    return _lipschitz_from_power(q, n, interval, z_range)


def estimate_lipschitz_riccati(p: Expression, interval: Interval, z_range) -> LipschitzEstimate:
    """Lipschitz constant of z -> p(x) z^2 over the declared z-range
    (|y^2 - z^2| <= sup|2 zeta| |y - z| on an interval range)."""
    return _lipschitz_from_power(p, 2.0, interval, z_range)


def hu_constant(M: float, L: float, interval: Interval) -> float:
    """Stability bound constant (b - a) * exp((M + L)(b - a))."""
    if M < 0 or L < 0:
        raise ValueError("M and L must be nonnegative")
    try:
        c = interval.length * math.exp((M + L) * interval.length)
    except OverflowError:
        raise CertificateUnusableError(
            f"bound constant overflows: (M+L)(b-a) = {(M + L) * interval.length:.3g}"
        ) from None
    if not math.isfinite(c):
        raise CertificateUnusableError("bound constant is not finite")
    return c


# ---------------------------------------------------------------------------
# Gronwall machinery


@dataclass(frozen=True)
class GronwallForm:
    """Integral inequality u(x) <= eps*(x-a) + integral_a^x beta(t) u(t) dt."""

    interval: Interval
    epsilon: float
    beta: object  # callable on arrays

    def alpha(self, x):
        return self.epsilon * (np.asarray(x, dtype=np.float64) - self.interval.a)

    def beta_values(self, xs: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.beta(xs), dtype=np.float64)
        return np.broadcast_to(vals, np.shape(xs)).astype(np.float64, copy=False)


def gronwall_bound(form: GronwallForm, x: float, panels: int = 10_000) -> float:
    """Exponential bound eps*(x-a)*exp(integral_a^x beta), trapezoid quadrature."""
    a, b = form.interval.a, form.interval.b
    if not (a <= x <= b):
        raise ValueError("x outside the form's interval")
    if x == a:
        return 0.0
    ts = np.linspace(a, x, panels + 1)
    bv = form.beta_values(ts)
    integral = float(np.trapezoid(bv, ts))
    return float(form.alpha(x)) * math.exp(integral)


def _cumtrapz(y: np.ndarray, h: float) -> np.ndarray:
    out = np.empty_like(y)
    out[0] = 0.0
    np.cumsum(0.5 * h * (y[1:] + y[:-1]), out=out[1:])
    return out


def gronwall_fixed_point(
    form: GronwallForm, grid_n: int = 2001, max_iter: int = 500, tol: float = 1e-14
):
    """Iterate u <- alpha + integral beta*u to its fixed point on a grid.

    Returns (xs, u_star, bound_on_grid).  The fixed point is the extremal
    solution of the integral inequality, so u_star <= bound pointwise is an
    independent check of the exponential bound.
    """
    xs = np.linspace(form.interval.a, form.interval.b, grid_n)
    h = float(xs[1] - xs[0])
    beta = form.beta_values(xs)
    if np.any(beta < 0):
        raise ValueError("beta must be nonnegative on the interval")
    alpha = np.asarray(form.alpha(xs), dtype=np.float64)
    u = alpha.copy()
    scale = max(1.0, float(np.max(np.abs(alpha))))
    for _ in range(max_iter):
        u_next = alpha + _cumtrapz(beta * u, h)
        delta = float(np.max(np.abs(u_next - u)))
        u = u_next
        if delta <= tol * scale:
            break
    bound = alpha * np.exp(_cumtrapz(beta, h))
    return xs, u, bound


def gronwall_dominance_ratio(form: GronwallForm, grid_n: int = 2001, max_iter: int = 500) -> float:
    """max over grid nodes of (fixed point) / (exponential bound), skipping the
    initial node where both sides vanish."""
    _, u, bound = gronwall_fixed_point(form, grid_n=grid_n, max_iter=max_iter)
    mask = bound > 0
    if not mask.any():
        return 0.0 if np.all(u == 0) else math.inf
    return float(np.max(u[mask] / bound[mask]))


# ---------------------------------------------------------------------------
# certification


@dataclass(frozen=True)
class HUCertificate:
    problem_kind: str  # "bernoulli" | "riccati"
    M: SupEstimate
    L: LipschitzEstimate
    interval: Interval
    c: float
    epsilon: float
    ensemble_size: int
    measured_sups: tuple[float, ...]
    max_ratio: float
    verdict: str  # "holds" | "violated" | "range_exited"
    diagnostics: tuple[str, ...] = ()

    def __post_init__(self):
        if self.c != hu_constant(self.M.value, self.L.value, self.interval):
            raise ValueError("stored c does not reproduce from M, L and the interval")
        bound = self.c * self.epsilon * HOLDS_SLACK
        within = all(s <= bound for s in self.measured_sups)
        if self.verdict == "holds" and not (within and not self.diagnostics):
            raise ValueError("verdict 'holds' inconsistent with measurements")

    @property
    def bound(self) -> float:
        return self.c * self.epsilon


def _measured_ratio(sups, bound: float) -> float:
    top = max(sups) if sups else 0.0
    if bound > 0:
        return top / bound
    return 0.0 if top == 0.0 else math.inf


def certify_ode(
    problem,
    spec: PerturbationSpec,
    count: int,
    config: SolverConfig = SolverConfig(),
    z_range=None,
) -> HUCertificate:
    """Solve the exact problem once and `count` perturbed copies, then compare
    every measured sup-distance against c * eps.

    z_range declares where the Lipschitz estimate is taken; any trajectory
    leaving it (or failing to integrate) downgrades the verdict to
    "range_exited" because the hypothesis chain no longer covers the data.
    """
    if z_range is None:
        raise ValueError("z_range is required: the Lipschitz constant is range-restricted")
    interval = problem.interval
    if isinstance(problem, BernoulliProblem):
        kind = "bernoulli"
        M = estimate_sup(problem.p, interval)
        L = estimate_lipschitz_bernoulli(problem.q, problem.n, interval, z_range)
    elif isinstance(problem, RiccatiProblem):
        kind = "riccati"
        M = estimate_sup(problem.q, interval)
        L = estimate_lipschitz_riccati(problem.p, interval, z_range)
    else:
        raise TypeError(f"unsupported problem type {type(problem).__name__}")

    c = hu_constant(M.value, L.value, interval)
    diagnostics: list[str] = []
    if L.clamped:
        diagnostics_note = "Lipschitz estimate was zero; clamped to a tiny positive value"
    else:
        diagnostics_note = None

    members = ensemble(spec, count)
    exact = solve_exact(problem, config)
    grid, values, failures = solve_perturbed_many(problem, members, config)

    z_lo, z_hi = float(z_range[0]), float(z_range[1])
    range_exited = False
    if exact.values.min() < z_lo or exact.values.max() > z_hi:
        range_exited = True
        diagnostics.append("exact trajectory left the declared z-range")

    sups: list[float] = []
    for i, failure in enumerate(failures):
        row = values[i]
        if failure is not None:
            range_exited = True
            diagnostics.append(
                f"member {i}: {failure.kind} at node {failure.node_index} (x = {failure.x:.6g})"
            )
            finite = np.isfinite(row)
            sups.append(
                float(np.max(np.abs(row[finite] - exact.values[finite]))) if finite.any() else math.inf
            )
            continue
        if row.min() < z_lo or row.max() > z_hi:
            range_exited = True
            diagnostics.append(f"member {i}: trajectory left the declared z-range")
        sups.append(float(np.max(np.abs(row - exact.values))))

    bound = c * spec.epsilon
    if range_exited:
        verdict = "range_exited"
    elif all(s <= bound * HOLDS_SLACK for s in sups):
        verdict = "holds"
    else:
        verdict = "violated"
        worst = int(np.argmax(sups))
        diagnostics.append(f"member {worst}: sup {sups[worst]:.6g} exceeds bound {bound:.6g}")
    if diagnostics_note:
        diagnostics.append(diagnostics_note)

    return HUCertificate(
        problem_kind=kind,
        M=M,
        L=L,
        interval=interval,
        c=c,
        epsilon=spec.epsilon,
        ensemble_size=count,
        measured_sups=tuple(sups),
        max_ratio=_measured_ratio(sups, bound),
        verdict=verdict,
        diagnostics=tuple(diagnostics),
    )


def certificate_to_dict(cert: HUCertificate) -> dict:
    return {
        "schema": "ulamcert/1",
        "kind": cert.problem_kind,
        "M": {
            "value": cert.M.value,
            "grid_points": cert.M.grid_points,
            "refinement_passes": cert.M.refinement_passes,
        },
        "L": {
            "value": cert.L.value,
            "method": cert.L.method,
            "z_range": list(cert.L.z_range),
            "clamped": cert.L.clamped,
        },
        "interval": [cert.interval.a, cert.interval.b],
        "c": cert.c,
        "epsilon": cert.epsilon,
        "bound": cert.bound,
        "ensemble_size": cert.ensemble_size,
        "measured_sups": list(cert.measured_sups),
        "max_ratio": cert.max_ratio,
        "verdict": cert.verdict,
        "diagnostics": list(cert.diagnostics),
    }


def write_certificate_json(cert, path) -> None:
    payload = cert if isinstance(cert, dict) else certificate_to_dict(cert)
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
