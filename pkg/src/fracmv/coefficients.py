"""Coefficient families for the mean-field reaction-diffusion dynamics.

Three ingredients enter the equation: a polynomial dissipative drift
``f``, a bounded reaction term ``g``, and a countable family of noise
modes ``sigma``.  Every family here is parametric with derived
structural constants (dissipation rate, Lipschitz rates, growth bound
fields), and :func:`verify_conditions` audits the claimed inequalities
on randomized draws, reporting worst-case slack per condition.

The measure enters through two bounded statistics of the particle
ensemble: a capped mean norm (drift coupling) and the root second
moment (noise coupling).  Both are 1-Lipschitz along Wasserstein-2,
which is what makes the audit's Lipschitz conditions uniform in the
ensemble.
"""

from __future__ import annotations

import math
from dataclasses import InitVar, dataclass, field

import numpy as np

from .errors import GridMismatchError, ValidationError
from .grid import GridFunction, SpatialGrid, check_fractional_order, l2_norm
from .measure import EmpiricalMeasure, second_moment, wasserstein2

__all__ = [
    "PsiField",
    "TimeProfile",
    "DriftF",
    "DriftG",
    "NoiseSigma",
    "CoefficientSet",
    "capped_mean_norm",
    "eval_f",
    "eval_g",
    "apply_sigma",
    "hs_norm_sq",
    "hs_bound_constant",
    "sigma_lipschitz_constant",
    "ConditionCheck",
    "ConditionReport",
    "verify_conditions",
]


@dataclass(frozen=True)
class PsiField:
    """Space-time bound field, positive and integrable in space.

    Two built-in shapes:

    - ``gaussian``: ``amp * exp(-|x|^2 / width^2)``, constant in time;
    - ``separable``: ``amp * (1 + t) * exp(-|x| / width)``.
    """

    kind: str
    amp: float
    width: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("gaussian", "separable"):
            raise ValidationError(f"psi field kind must be gaussian or separable, got {self.kind!r}")
        if not (float(self.amp) >= 0.0):
            raise ValidationError(f"psi field amp must be >= 0, got {self.amp!r}")
        if not (float(self.width) > 0.0):
            raise ValidationError(f"psi field width must be positive, got {self.width!r}")

    def spatial(self, grid: SpatialGrid) -> np.ndarray:
        key = ("spatial", grid)
        if key not in self._cache:
            r = grid.radius()
            if self.kind == "gaussian":
                arr = self.amp * np.exp(-(r**2) / self.width**2)
            else:
                arr = self.amp * np.exp(-r / self.width)
            self._cache[key] = arr
        return self._cache[key]

    def time_factor(self, t: float) -> float:
        return 1.0 if self.kind == "gaussian" else 1.0 + float(t)

    def values(self, t: float, grid: SpatialGrid) -> np.ndarray:
        return self.time_factor(t) * self.spatial(grid)


@dataclass(frozen=True)
class TimeProfile:
    """Scalar modulation ``c(t) = offset + amp * sin(freq t + phase)``."""

    offset: float = 1.0
    amp: float = 0.0
    freq: float = 1.0
    phase: float = 0.0

    def __call__(self, t: float) -> float:
        return self.offset + self.amp * math.sin(self.freq * float(t) + self.phase)

    def sup_abs(self, horizon: float) -> float:
        """Exact ``sup_{0 <= t <= T} |c(t)|``.

        The extrema of a sinusoid are its endpoints plus interior
        critical points where the cosine vanishes, all enumerable.
        """
        T = float(horizon)
        if T < 0.0:
            raise ValidationError(f"horizon must be >= 0, got {horizon!r}")
        candidates = [0.0, T]
        if self.amp != 0.0 and self.freq != 0.0:
            k_lo = math.floor((self.freq * 0.0 + self.phase - math.pi / 2) / math.pi) - 1
            k_hi = math.ceil((self.freq * T + self.phase - math.pi / 2) / math.pi) + 1
            for k in range(k_lo, k_hi + 1):
                t_crit = (math.pi / 2 + k * math.pi - self.phase) / self.freq
                if 0.0 <= t_crit <= T:
                    candidates.append(t_crit)
        return max(abs(self(t)) for t in candidates)


def capped_mean_norm(mu: EmpiricalMeasure, cap: float) -> float:
    """Mean of ``min(||atom||, cap)`` over the ensemble.

    Bounded by ``cap`` and by the root second moment, and 1-Lipschitz
    with respect to Wasserstein-2.
    """
    if not (float(cap) > 0.0):
        raise ValidationError(f"cap must be positive, got {cap!r}")
    w = mu.grid.cell_volume
    norms = np.sqrt(np.sum(mu.flat() ** 2, axis=1) * w)
    return float(np.mean(np.minimum(norms, float(cap))))


# -- drift f -----------------------------------------------------------


@dataclass(frozen=True)
class DriftF:
    """Polynomial dissipative drift with a bounded measure coupling.

    Pointwise form::

        f(t, x, u, mu) = lambda_f * |u|^(p-2) * u + phi(t, x) * hbar(mu)

    with ``hbar`` the capped mean norm of the ensemble.  ``p`` must be
    an even integer >= 2.  ``lambda_f`` is the dissipation rate; the
    model contract requires it positive, which :func:`verify_conditions`
    checks (construction with ``validate=False`` admits broken instances
    for audit exercises).
    """

    p: int
    lambda_f: float
    h_cap: float
    phi: PsiField
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool):
        if not (isinstance(self.p, (int, np.integer)) and self.p >= 2 and self.p % 2 == 0):
            raise ValidationError(f"drift exponent p must be an even integer >= 2, got {self.p!r}")
        if not (float(self.h_cap) > 0.0):
            raise ValidationError(f"h_cap must be positive, got {self.h_cap!r}")
        if validate and not (float(self.lambda_f) > 0.0):
            raise ValidationError(f"lambda_f must be positive, got {self.lambda_f!r}")

    # claimed structural constants

    @property
    def dissipation_rate(self) -> float:
        return float(self.lambda_f)

    @property
    def lipschitz_rate(self) -> float:
        return float(self.lambda_f) * (self.p - 1)

    @property
    def growth_rate(self) -> float:
        return float(self.lambda_f)

    @property
    def strong_dissipation_rate(self) -> float:
        """Rate of the strengthened difference form, ``2^(2-p) * lambda_f``."""
        return float(self.lambda_f) * 2.0 ** (2 - self.p)

    def dissipation_bound_values(self, t: float, grid: SpatialGrid) -> np.ndarray:
        """Bound field absorbing the measure coupling, ``(h_cap/2) |phi|``."""
        return 0.5 * self.h_cap * np.abs(self.phi.values(t, grid))

    def measure_coupling_values(self, t: float, grid: SpatialGrid) -> np.ndarray:
        """Bound field in front of the Wasserstein term, ``|phi|``."""
        return np.abs(self.phi.values(t, grid))

    def power_values(self, u_values: np.ndarray) -> np.ndarray:
        """The monotone part ``lambda_f |u|^(p-2) u`` (even p, so a polynomial)."""
        if self.p == 2:
            return self.lambda_f * u_values
        return self.lambda_f * u_values ** (self.p - 1)


def eval_f(f: DriftF, t: float, u: GridFunction, mu: EmpiricalMeasure) -> GridFunction:
    if u.grid != mu.grid:
        raise GridMismatchError("field and measure live on different grids")
    hbar = capped_mean_norm(mu, f.h_cap)
    vals = f.power_values(u.values) + f.phi.values(t, u.grid) * hbar
    return GridFunction(u.grid, vals)


# -- drift g -----------------------------------------------------------


@dataclass(frozen=True)
class DriftG:
    """Bounded reaction term ``psi(t,x) * (c0 + c1 tanh(u) + c2 hbar1(mu))``.

    ``hbar1`` is the unit-capped mean norm, so both nonlinear slots are
    bounded by 1 and 1-Lipschitz.  The model contract requires
    ``max(|c0|, |c1|, |c2|) <= 1`` so ``psi`` itself bounds the term;
    the audit reports a violation when the contract is broken.
    """

    c0: float
    c1: float
    c2: float
    psi: PsiField
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool):
        for name in ("c0", "c1", "c2"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"drift_g.{name} must be finite, got {v!r}")
            if validate and abs(v) > 1.0:
                raise ValidationError(f"drift_g.{name} must satisfy |{name}| <= 1, got {v!r}")

    def bound_values(self, t: float, grid: SpatialGrid) -> np.ndarray:
        """The claimed envelope field (``psi`` itself)."""
        return np.abs(self.psi.values(t, grid))


def eval_g(g: DriftG, t: float, u: GridFunction, mu: EmpiricalMeasure) -> GridFunction:
    if u.grid != mu.grid:
        raise GridMismatchError("field and measure live on different grids")
    hbar1 = capped_mean_norm(mu, 1.0)
    vals = g.psi.values(t, u.grid) * (g.c0 + g.c1 * np.tanh(u.values) + g.c2 * hbar1)
    return GridFunction(u.grid, vals)


# -- noise family ------------------------------------------------------


@dataclass(frozen=True)
class NoiseSigma:
    """K-mode diffusion coefficient.

    Mode ``k`` maps a scalar ``theta_k`` to the field::

        (sigma1_k(t, x) + kappa(x) * sigma2_k(t, u(x), mu)) * theta_k

    where ``sigma1_k(t, x) = profile(t) * shape_k(x)`` and
    ``sigma2_k(t, s, mu) = beta_k * sqrt(mu(||.||^2)) + gamma_k * s``.
    The per-mode Lipschitz rate is ``max(beta_k, gamma_k)``.
    """

    shapes: tuple[GridFunction, ...]
    kappa: GridFunction
    beta: np.ndarray
    gamma: np.ndarray
    profile: TimeProfile = TimeProfile()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        shapes = tuple(self.shapes)
        if len(shapes) < 1:
            raise ValidationError("noise needs at least one mode")
        g = self.kappa.grid
        for s in shapes:
            if s.grid != g:
                raise GridMismatchError("noise mode shapes and kappa must share one grid")
        b = np.asarray(self.beta, dtype=float)
        c = np.asarray(self.gamma, dtype=float)
        if b.shape != (len(shapes),) or c.shape != (len(shapes),):
            raise ValidationError(
                f"beta/gamma must have shape ({len(shapes)},), got {b.shape} and {c.shape}"
            )
        if np.any(b < 0.0) or np.any(c < 0.0):
            raise ValidationError("beta and gamma entries must be >= 0")
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "gamma", c)

    @property
    def grid(self) -> SpatialGrid:
        return self.kappa.grid

    @property
    def n_modes(self) -> int:
        return len(self.shapes)

    def shape_stack(self) -> np.ndarray:
        key = "stack"
        if key not in self._cache:
            self._cache[key] = np.stack([s.values for s in self.shapes])
        return self._cache[key]

    def mode_lipschitz(self) -> np.ndarray:
        """Per-mode Lipschitz rates ``max(beta_k, gamma_k)``."""
        return np.maximum(self.beta, self.gamma)

    def _bshape(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape((self.n_modes,) + (1,) * self.grid.dim)

    def mode_fields(self, t: float, u_values: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        """Stack of per-mode coefficient fields, shape ``(K, *grid.shape)``."""
        root_m2 = math.sqrt(second_moment(mu))
        sig2 = self._bshape(self.beta) * root_m2 + self._bshape(self.gamma) * u_values[None]
        return self.profile(t) * self.shape_stack() + self.kappa.values[None] * sig2


def apply_sigma(
    sig: NoiseSigma, t: float, u: GridFunction, mu: EmpiricalMeasure, theta: np.ndarray
) -> GridFunction:
    """Contract the mode fields against a coefficient vector ``theta``."""
    if u.grid != sig.grid or mu.grid != sig.grid:
        raise GridMismatchError("field, measure, and noise must share one grid")
    th = np.asarray(theta, dtype=float)
    if th.shape != (sig.n_modes,):
        raise ValidationError(f"theta must have shape ({sig.n_modes},), got {th.shape}")
    fields = sig.mode_fields(t, u.values, mu)
    out = np.tensordot(th, fields, axes=(0, 0))
    return GridFunction(u.grid, out)


def hs_norm_sq(sig: NoiseSigma, t: float, u: GridFunction, mu: EmpiricalMeasure) -> float:
    """Squared Hilbert-Schmidt norm: sum over modes of squared L2 norms."""
    if u.grid != sig.grid or mu.grid != sig.grid:
        raise GridMismatchError("field, measure, and noise must share one grid")
    fields = sig.mode_fields(t, u.values, mu)
    return float(sig.grid.cell_volume * np.sum(fields**2))


def hs_bound_constant(sig: NoiseSigma, horizon: float) -> float:
    """Growth constant ``M_T`` of the Hilbert-Schmidt bound.

    ``hs_norm_sq(t, u, mu) <= M_T (1 + ||u||^2 + mu(||.||^2))`` with::

        M_T = 2 sup_t sum_k ||sigma1_k(t)||^2
            + 8 ||kappa||^2 |beta|^2 + 4 ||kappa||_inf^2 |gamma|^2
    """
    sup_profile = sig.profile.sup_abs(horizon)
    sum_shapes = sum(l2_norm(s) ** 2 for s in sig.shapes)
    kappa_l2_sq = l2_norm(sig.kappa) ** 2
    kappa_inf_sq = float(np.max(np.abs(sig.kappa.values))) ** 2
    return (
        2.0 * sup_profile**2 * sum_shapes
        + 8.0 * kappa_l2_sq * float(np.sum(sig.beta**2))
        + 4.0 * kappa_inf_sq * float(np.sum(sig.gamma**2))
    )


def sigma_lipschitz_constant(sig: NoiseSigma) -> float:
    """Lipschitz constant of the mode family in ``(u, mu)``.

    ``sum_k ||Delta sigma_k||^2 <= L (||u1 - u2||^2 + W2(mu1, mu2)^2)``
    with ``L = 2 sum_k max(beta_k, gamma_k)^2 (||kappa||_inf^2 + ||kappa||^2)``.
    """
    kappa_l2_sq = l2_norm(sig.kappa) ** 2
    kappa_inf_sq = float(np.max(np.abs(sig.kappa.values))) ** 2
    return 2.0 * float(np.sum(sig.mode_lipschitz() ** 2)) * (kappa_inf_sq + kappa_l2_sq)


@dataclass(frozen=True)
class CoefficientSet:
    """Everything the steppers need: drifts, noise, diffusion order."""

    f: DriftF
    g: DriftG
    sigma: NoiseSigma
    alpha: float
    c_v: float = 1.0

    def __post_init__(self):
        check_fractional_order(self.alpha)
        if not (float(self.c_v) > 0.0):
            raise ValidationError(f"c_v must be positive, got {self.c_v!r}")


# -- randomized condition audit ----------------------------------------


@dataclass(frozen=True)
class ConditionCheck:
    condition: str
    passed: bool
    worst_slack: float
    n_draws: int
    detail: str = ""


@dataclass(frozen=True)
class ConditionReport:
    checks: tuple[ConditionCheck, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[ConditionCheck]:
        return [c for c in self.checks if not c.passed]

    def by_name(self, condition: str) -> ConditionCheck:
        for c in self.checks:
            if c.condition == condition:
                return c
        raise KeyError(condition)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok" if c.passed else "VIOLATED"
            lines.append(
                f"{c.condition:<24s} {status:<9s} worst slack {c.worst_slack: .3e}"
                + (f"  ({c.detail})" if c.detail else "")
            )
        return "\n".join(lines)


def _random_field(rng: np.random.Generator, grid: SpatialGrid) -> np.ndarray:
    """A smooth random field with a widely varying amplitude scale."""
    L = grid.half_width
    vals = np.zeros(grid.shape)
    for axis_coord in grid.coordinates():
        for j in range(1, 4):
            amp = rng.standard_normal()
            phase = rng.uniform(0.0, 2.0 * np.pi)
            vals = vals + amp * np.cos(np.pi * j * axis_coord / L + phase)
    vals += rng.standard_normal()
    scale = 10.0 ** rng.uniform(-1.3, 0.9)
    return scale * vals


def _random_measure(rng: np.random.Generator, grid: SpatialGrid, n: int) -> EmpiricalMeasure:
    return EmpiricalMeasure(grid, np.stack([_random_field(rng, grid) for _ in range(n)]))


def verify_conditions(
    coeffs: CoefficientSet,
    grid: SpatialGrid,
    horizon: float,
    n_draws: int = 1000,
    seed: int = 0,
    include_strong_dissipativity: bool = False,
    tol: float = 1e-9,
) -> ConditionReport:
    """Randomized audit of every structural inequality of the model.

    Each draw picks a time, a pair of random fields, and a pair of
    small random ensembles, then checks the pointwise and integrated
    inequalities with the instance's claimed constants.  Writing a
    condition as ``lhs <= rhs``, its slack at a sample point is the
    scale-free gap ``(rhs - lhs) / (1 + |lhs| + |rhs|)``, so a tight
    but true inequality sits at round-off level regardless of the draw
    amplitude.  A condition passes when its worst observed slack stays
    above ``-tol``.  Structural facts (positivity of rates, coefficient
    caps) are folded into the condition they underwrite.
    """
    if n_draws < 1:
        raise ValidationError(f"n_draws must be >= 1, got {n_draws!r}")
    rng = np.random.default_rng(seed)
    f, g, sig = coeffs.f, coeffs.g, coeffs.sigma
    T = float(horizon)

    worst: dict[str, float] = {}
    notes: dict[str, str] = {}

    def track(name: str, lhs, rhs) -> None:
        """Record the worst normalized slack of ``lhs <= rhs``."""
        lhs, rhs = np.asarray(lhs, dtype=float), np.asarray(rhs, dtype=float)
        gap = (rhs - lhs) / (1.0 + np.abs(lhs) + np.abs(rhs))
        worst[name] = min(worst.get(name, np.inf), float(np.min(gap)))

    # structural parts
    if not (f.dissipation_rate > 0.0):
        worst["f_dissipativity"] = -np.inf
        notes["f_dissipativity"] = f"dissipation rate {f.lambda_f!r} is not positive"
    if not (f.lipschitz_rate > 0.0):
        worst["f_lipschitz"] = -np.inf
        notes["f_lipschitz"] = "lipschitz rate is not positive"
    if not (f.growth_rate > 0.0):
        worst["f_growth"] = -np.inf
        notes["f_growth"] = "growth rate is not positive"
    if abs(g.c0) > 1.0:
        notes["g_bound_at_zero"] = f"|c0| = {abs(g.c0):.3g} exceeds the unit cap"
    if max(abs(g.c1), abs(g.c2)) > 1.0:
        notes["g_lipschitz"] = (
            f"max(|c1|,|c2|) = {max(abs(g.c1), abs(g.c2)):.3g} exceeds the unit cap"
        )
    if max(abs(g.c0), abs(g.c1), abs(g.c2)) > 1.0:
        notes["g_growth"] = "a reaction coefficient exceeds the unit cap"

    M_T = hs_bound_constant(sig, T)
    L_sig = sigma_lipschitz_constant(sig)
    L_modes = sig.mode_lipschitz()
    kappa_vals = sig.kappa.values
    w = grid.cell_volume

    zero_u = np.zeros(grid.shape)
    dirac0 = EmpiricalMeasure(grid, zero_u[None])

    p = f.p
    lam1, lam2, lam3 = f.dissipation_rate, f.lipschitz_rate, f.growth_rate
    lam4 = f.strong_dissipation_rate

    for _ in range(int(n_draws)):
        t = rng.uniform(0.0, T)
        u1 = _random_field(rng, grid)
        u2 = _random_field(rng, grid)
        mu1 = _random_measure(rng, grid, 4)
        mu2 = _random_measure(rng, grid, 4)
        w2 = wasserstein2(mu1, mu2)
        m2_1, m2_2 = second_moment(mu1), second_moment(mu2)

        hb1, hb2 = capped_mean_norm(mu1, f.h_cap), capped_mean_norm(mu2, f.h_cap)
        phi_t = f.phi.values(t, grid)
        f1 = f.power_values(u1) + phi_t * hb1
        f2 = f.power_values(u2) + phi_t * hb2
        psi1 = f.dissipation_bound_values(t, grid)
        psi3 = f.measure_coupling_values(t, grid)

        track("f_dissipativity", lam1 * np.abs(u1) ** p - psi1 * (1.0 + u1**2 + m2_1), f1 * u1)
        lip_rhs = lam2 * (np.abs(u1) ** (p - 2) + np.abs(u2) ** (p - 2)) * np.abs(u1 - u2)
        track("f_lipschitz", np.abs(f1 - f2), lip_rhs + psi3 * w2)
        track("f_growth", np.abs(f1), lam3 * np.abs(u1) ** (p - 1) + psi3 * (1.0 + math.sqrt(m2_1)))
        f1_mu, f2_mu = f.power_values(u1) + phi_t * hb1, f.power_values(u2) + phi_t * hb1
        track("f_monotonicity", 0.0, (f1_mu - f2_mu) * (u1 - u2))
        if include_strong_dissipativity:
            track(
                "f_strong_dissipativity",
                lam4 * np.abs(u1 - u2) ** p,
                (f1_mu - f2_mu) * (u1 - u2),
            )

        hb1_unit, hb2_unit = capped_mean_norm(mu1, 1.0), capped_mean_norm(mu2, 1.0)
        psi_t = g.psi.values(t, grid)
        bound = g.bound_values(t, grid)
        g0 = psi_t * (g.c0 + g.c1 * np.tanh(zero_u) + g.c2 * capped_mean_norm(dirac0, 1.0))
        track("g_bound_at_zero", np.abs(g0), bound)
        g1 = psi_t * (g.c0 + g.c1 * np.tanh(u1) + g.c2 * hb1_unit)
        g2 = psi_t * (g.c0 + g.c1 * np.tanh(u2) + g.c2 * hb2_unit)
        track("g_lipschitz", np.abs(g1 - g2), bound * (np.abs(u1 - u2) + w2))
        track("g_growth", np.abs(g1), bound * (1.0 + np.abs(u1) + math.sqrt(m2_1)))

        r1, r2 = math.sqrt(m2_1), math.sqrt(m2_2)
        sig2_1 = sig._bshape(sig.beta) * r1 + sig._bshape(sig.gamma) * u1[None]
        sig2_2 = sig._bshape(sig.beta) * r2 + sig._bshape(sig.gamma) * u2[None]
        rhs = sig._bshape(sig.beta) * (1.0 + r1) + sig._bshape(sig.gamma) * np.abs(u1)[None]
        track("sigma2_growth", np.abs(sig2_1), rhs)
        lip = sig._bshape(L_modes) * (np.abs(u1 - u2)[None] + w2)
        track("sigma2_lipschitz", np.abs(sig2_1 - sig2_2), lip)

        fields1 = sig.profile(t) * sig.shape_stack() + kappa_vals[None] * sig2_1
        hs1 = w * np.sum(fields1**2)
        norm_u1_sq = w * np.sum(u1**2)
        track("hs_growth", hs1, M_T * (1.0 + norm_u1_sq + m2_1))
        diff = kappa_vals[None] * (sig2_1 - sig2_2)
        hs_diff = w * np.sum(diff**2)
        norm_du_sq = w * np.sum((u1 - u2) ** 2)
        track("hs_lipschitz", hs_diff, L_sig * (norm_du_sq + w2**2))

    order = [
        "f_dissipativity",
        "f_lipschitz",
        "f_growth",
        "f_monotonicity",
        "g_bound_at_zero",
        "g_lipschitz",
        "g_growth",
        "sigma2_growth",
        "sigma2_lipschitz",
        "hs_growth",
        "hs_lipschitz",
    ]
    if include_strong_dissipativity:
        order.insert(4, "f_strong_dissipativity")

    checks = []
    for name in order:
        slack = worst.get(name, np.inf)
        passed = slack >= -tol and name not in notes
        checks.append(
            ConditionCheck(
                condition=name,
                passed=bool(passed),
                worst_slack=float(slack),
                n_draws=int(n_draws),
                detail=notes.get(name, ""),
            )
        )
    return ConditionReport(tuple(checks))
