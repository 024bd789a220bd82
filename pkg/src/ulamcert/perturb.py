"""Smooth perturbation families with analytically certified sup bounds.

Every family is built from a unit-amplitude C^1 profile whose sup is
bounded by 1 *by construction*, not by sampling:

  sine        u(x) = sin(omega x + theta)                      |sin| <= 1
  constant    u(x) = +-1
  fourier_mix u(x) = sum c_k sin(k w0 x + theta_k) / sum|c_k|  (l1 normalised)
  bump        u(x) = 0.25 (1 + tanh(s(x-c1))) (1 - tanh(s(x-c2)))

Two-dimensional perturbations are products of one-dimensional profiles, so
the unit bound survives.  The unweighted perturbation is eps * u; weighted
mode multiplies by a positive weight function phi(x, y) instead, giving
|g| <= eps * phi pointwise.

All parameters not pinned in the spec are drawn deterministically from the
spec's seed, so ensembles are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exprdsl import Expression, compile_fn

FAMILIES = ("sine", "constant", "fourier_mix", "bump")


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    epsilon: float
    params: dict = field(default_factory=dict)
    seed: int = 0
    dims: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        # epsilon == 0 is permitted as the explicit zero-amplitude edge case
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be a finite nonnegative real")
        if self.dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.family == "fourier_mix" and int(self.params.get("terms", 5)) < 1:
            raise ValueError("fourier_mix needs at least one term")


class Perturbation:
    """Evaluable perturbation with a constructive sup certificate.

    Unweighted: |g| <= certified_sup == epsilon everywhere.
    Weighted:   |g(x, y)| <= epsilon * phi(x, y) everywhere.
    """

    def __init__(self, profile, family, params, seed, epsilon, dims, curvature_bound, weight=None):
        self._profile = profile  # unit-sup callable
        self.family = family
        self.params = params
        self.seed = seed
        self.epsilon = epsilon
        self.dims = dims
        self.curvature_bound = curvature_bound  # analytic sup of |u''| along either axis
        self.weight = weight
        self._weight_fn = compile_fn(weight) if weight is not None else None
        self.certified_sup = epsilon

    def __call__(self, x, y=None):
        if self.dims == 1:
            if y is not None:
                raise TypeError("one-dimensional perturbation called with two coordinates")
            u = self._profile(np.asarray(x, dtype=np.float64))
        else:
            if y is None:
                raise TypeError("two-dimensional perturbation needs x and y")
            u = self._profile(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        if self._weight_fn is not None:
            kwargs = {}
            if "x" in self.weight.variables:
                kwargs["x"] = x
            if "y" in self.weight.variables:
                kwargs["y"] = y
            return self.epsilon * self._weight_fn(**kwargs) * u
        return self.epsilon * u

    def manifest_entry(self) -> dict:
        return {
            "family": self.family,
            "params": self.params,
            "seed": self.seed,
            "epsilon": self.epsilon,
        }


def _x_range(params):
    lo, hi = params.get("x_range", (0.0, 1.0))
    if not hi > lo:
        raise ValueError("x_range must be an increasing pair")
    return float(lo), float(hi)


def _build_sine(params, rng):
    lo, hi = _x_range(params)
    span = hi - lo
    omega = float(params.get("omega", rng.uniform(0.5, 8.0) / span))
    theta = float(params.get("theta", rng.uniform(0.0, 2.0 * math.pi)))
    resolved = {"omega": omega, "theta": theta}

    def u(x):
        return np.sin(omega * x + theta)

    return u, resolved, omega * omega


def _build_constant(params, rng):
    sign = float(params.get("sign", float(rng.integers(0, 2) * 2 - 1)))
    if sign not in (-1.0, 1.0):
        raise ValueError("constant family sign must be +1 or -1")

    def u(x):
        return np.full_like(np.asarray(x, dtype=np.float64), sign)

    return u, {"sign": sign}, 0.0


def _build_fourier_mix(params, rng):
    lo, hi = _x_range(params)
    span = hi - lo
    terms = int(params.get("terms", 5))
    base_omega = float(params.get("base_omega", 2.0 * math.pi / span))
    coeffs = params.get("coeffs")
    if coeffs is None:
        coeffs = rng.uniform(-1.0, 1.0, size=terms)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    phases = params.get("phases")
    if phases is None:
        phases = rng.uniform(0.0, 2.0 * math.pi, size=terms)
    phases = np.asarray(phases, dtype=np.float64)
    l1 = float(np.sum(np.abs(coeffs)))
    if l1 == 0.0:
        coeffs = np.ones(terms)
        l1 = float(terms)
    ks = np.arange(1, terms + 1, dtype=np.float64)
    weights = coeffs / l1
    resolved = {
        "terms": terms,
        "base_omega": base_omega,
        "coeffs": coeffs.tolist(),
        "phases": phases.tolist(),
    }

    def u(x):
        x = np.asarray(x, dtype=np.float64)
        phase = np.multiply.outer(x, ks * base_omega) + phases
        return np.sin(phase) @ weights

    curvature = float(np.sum(np.abs(weights) * (ks * base_omega) ** 2))
    return u, resolved, curvature


def _build_bump(params, rng):
    lo, hi = _x_range(params)
    span = hi - lo
    center = float(params.get("center", rng.uniform(lo + 0.25 * span, hi - 0.25 * span)))
    width = float(params.get("width", rng.uniform(0.2, 0.5) * span))
    steepness = float(params.get("steepness", rng.uniform(6.0, 16.0) / width))
    c1 = center - 0.5 * width
    c2 = center + 0.5 * width
    resolved = {"center": center, "width": width, "steepness": steepness}

    def u(x):
        x = np.asarray(x, dtype=np.float64)
        return 0.25 * (1.0 + np.tanh(steepness * (x - c1))) * (1.0 - np.tanh(steepness * (x - c2)))

    # each tanh factor has |d^2/dx^2| <= s^2 * 4/(3 sqrt(3)) and |d/dx| <= s;
    # a conservative product bound is 2 s^2
    return u, resolved, 2.0 * steepness * steepness


_BUILDERS = {
    "sine": _build_sine,
    "constant": _build_constant,
    "fourier_mix": _build_fourier_mix,
    "bump": _build_bump,
}


def make_perturbation(spec: PerturbationSpec, weight: Expression | None = None) -> Perturbation:
    """Construct the perturbation named by the spec.

    `weight` switches on weighted mode: the unit profile is multiplied by
    eps * weight(x, y) instead of eps, certifying |g| <= eps * weight
    pointwise.  Weighted mode requires dims == 2.
    """
    rng = np.random.default_rng(spec.seed)
    builder = _BUILDERS[spec.family]
    if weight is not None:
        if spec.dims != 2:
            raise ValueError("weighted perturbations are two-dimensional")
        if not set(weight.variables) <= {"x", "y"}:
            raise ValueError("weight must be an expression over x and y")
    if spec.dims == 1:
        u, resolved, curvature = builder(spec.params, rng)
        return Perturbation(u, spec.family, resolved, spec.seed, spec.epsilon, 1, curvature, weight)

    # draws are ordered x-axis first, then y-axis, for reproducibility
    params_x = dict(spec.params.get("x", {}))
    params_y = dict(spec.params.get("y", {}))
    if "x_range" in spec.params:
        params_x.setdefault("x_range", spec.params["x_range"])
    if "y_range" in spec.params:
        params_y.setdefault("x_range", spec.params["y_range"])
    ux, resolved_x, curv_x = builder(params_x, rng)
    if spec.family == "constant":
        # a product of two signs is just one sign; keep the x draw only
        def profile(x, y):
            return ux(x) * np.ones_like(np.asarray(y, dtype=np.float64))

        resolved = {"x": resolved_x, "y": {}}
        curvature = 0.0
    else:
        uy, resolved_y, curv_y = builder(params_y, rng)

        def profile(x, y):
            return ux(x) * uy(y)

        resolved = {"x": resolved_x, "y": resolved_y}
        curvature = max(curv_x, curv_y)
    return Perturbation(
        profile, spec.family, resolved, spec.seed, spec.epsilon, 2, curvature, weight
    )


def ensemble(spec: PerturbationSpec, count: int, weight: Expression | None = None) -> list[Perturbation]:
    """Deterministic ensemble; member i draws from seed XOR i.

    Member 0 is exactly make_perturbation(spec).  For non-constant families,
    members 1 and 2 are replaced by the adversarial constant +eps / -eps
    profiles, which maximise the accumulated perturbation and probe the
    bound's tightness; remaining members vary the spec family's free
    parameters.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    members = []
    for i in range(count):
        member_spec = replace(spec, seed=spec.seed ^ i)
        if spec.family != "constant" and i in (1, 2):
            sign = 1.0 if i == 1 else -1.0
            member_spec = replace(member_spec, family="constant", params={"sign": sign})
        members.append(make_perturbation(member_spec, weight=weight))
    return members


def ensemble_manifest(members: list[Perturbation]) -> list[dict]:
    return [m.manifest_entry() for m in members]


def write_manifest(members: list[Perturbation], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(ensemble_manifest(members), fh, indent=2, sort_keys=True)
        fh.write("\n")
