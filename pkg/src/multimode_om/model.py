"""Physical parameters, derived scales and pump bookkeeping.

Everything is dimensionless, measured in units of a reference frequency
(conventionally the mean mechanical frequency, so ``OmegaBar == 1``).
"""
from __future__ import annotations

import cmath
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace

import numpy as np

WEAK_COUPLING_WARN = 0.1


class ParameterError(ValueError):
    """Non-physical parameter set (hard validation failure)."""


@dataclass(frozen=True)
class SystemParams:
    omega1: float
    omega2: float
    g1: float
    g2: float
    kappa: float
    Delta1: float
    Delta2: float
    alpha1: float
    alpha2: float
    zHO1: float = 1.0
    zHO2: float = 1.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    nth1: float = 0.0
    nth2: float = 0.0

    @property
    def omegas(self):
        return (self.omega1, self.omega2)

    @property
    def gs(self):
        return (self.g1, self.g2)

    @property
    def Deltas(self):
        return (self.Delta1, self.Delta2)

    @property
    def alphas(self):
        return (self.alpha1, self.alpha2)

    def replace(self, **changes) -> "SystemParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SystemParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParameterError(f"unknown parameter keys: {', '.join(unknown)}")
        missing = [f.name for f in fields(cls)
                   if f.name not in data and f.default is MISSING]
        if missing:
            raise ParameterError(f"missing parameter keys: {', '.join(missing)}")
        try:
            values = {k: float(v) for k, v in data.items()}
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"non-numeric parameter value: {exc}") from None
        return cls(**values)


def load_params(path) -> SystemParams:
    """Read a flat JSON parameter file. Unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ParameterError("parameter file must hold a JSON object")
    return SystemParams.from_dict(data)


@dataclass(frozen=True)
class DerivedScales:
    G1: float
    G2: float
    deltaOmega: float
    OmegaBar: float
    DeltaBar: float


def derived_scales(p: SystemParams) -> DerivedScales:
    # G_j = g_j * alpha uses the common amplitude; with unequal amplitudes
    # the geometric mean keeps G1*G2 = g1*g2*alpha1*alpha2.
    alpha = float(np.sqrt(p.alpha1 * p.alpha2))
    return DerivedScales(
        G1=p.g1 * alpha,
        G2=p.g2 * alpha,
        deltaOmega=p.omega1 - p.omega2,
        OmegaBar=0.5 * (p.omega1 + p.omega2),
        DeltaBar=0.5 * (p.Delta1 + p.Delta2),
    )


def from_scales(OmegaBar=1.0, deltaOmega=0.1, DeltaBar=0.0, kappa=1.0,
                G1=0.01, G2=0.01, alpha=10.0, split=None, **extra) -> SystemParams:
    """Build a parameter set from mean/difference coordinates.

    ``split`` is the pump detuning difference Delta1 - Delta2; it defaults to
    the bare beam-splitter resonance ``deltaOmega``.
    """
    if split is None:
        split = deltaOmega
    return SystemParams(
        omega1=OmegaBar + 0.5 * deltaOmega,
        omega2=OmegaBar - 0.5 * deltaOmega,
        g1=G1 / alpha,
        g2=G2 / alpha,
        kappa=kappa,
        Delta1=DeltaBar + 0.5 * split,
        Delta2=DeltaBar - 0.5 * split,
        alpha1=alpha,
        alpha2=alpha,
        **extra,
    )


@dataclass(frozen=True)
class PumpDrive:
    eta1: complex
    eta2: complex
    omegaL1: float
    omegaL2: float
    omegac: float

    @property
    def Deltas(self):
        return (self.omegac - self.omegaL1, self.omegac - self.omegaL2)


def steady_amplitudes(drive: PumpDrive, kappa: float) -> tuple[complex, complex]:
    """Displacement amplitudes that cancel the pump source terms."""
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    return tuple(-1j * eta / (0.5 * kappa + 1j * D)
                 for eta, D in zip((drive.eta1, drive.eta2), drive.Deltas))


def params_from_drive(drive: PumpDrive, omega1, omega2, g1, g2, kappa, **extra):
    """Resolve a complex drive into real amplitudes.

    Returns ``(params, phases)`` where ``phases`` are the stripped arguments of
    the complex amplitudes, kept so the drive can be reconstructed.
    """
    if drive.omegaL2 <= drive.omegaL1:
        raise ParameterError("pump 2 must be the higher-frequency tone")
    a1, a2 = steady_amplitudes(drive, kappa)
    D1, D2 = drive.Deltas
    p = SystemParams(omega1=omega1, omega2=omega2, g1=g1, g2=g2, kappa=kappa,
                     Delta1=D1, Delta2=D2, alpha1=abs(a1), alpha2=abs(a2), **extra)
    return p, (cmath.phase(a1), cmath.phase(a2))


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float
    severity: str  # "error" | "warning"


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)
    weak_coupling_ratio: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks if c.severity == "error")

    @property
    def warnings(self) -> list[Check]:
        return [c for c in self.checks if c.severity == "warning" and not c.passed]


def weak_coupling_ratio(p: SystemParams) -> float:
    denom = p.kappa * abs(p.omega1 - p.omega2)
    return p.g1 * p.g2 * p.alpha1 * p.alpha2 / denom if denom > 0 else np.inf


def validate(p: SystemParams, raise_on_error=True) -> ValidationReport:
    """Check physical invariants.

    Non-positive frequencies or rates, negative amplitudes and a wrong mode
    ordering are hard errors; leaving the weak-coupling regime is a warning.
    """
    r = weak_coupling_ratio(p)
    checks = [
        Check("omega2 > 0", p.omega2 > 0, p.omega2, "error"),
        Check("omega1 > omega2", p.omega1 > p.omega2, p.omega1 - p.omega2, "error"),
        Check("kappa > 0", p.kappa > 0, p.kappa, "error"),
        Check("alpha1 >= 0", p.alpha1 >= 0, p.alpha1, "error"),
        Check("alpha2 >= 0", p.alpha2 >= 0, p.alpha2, "error"),
        Check("gamma >= 0", min(p.gamma1, p.gamma2) >= 0, min(p.gamma1, p.gamma2), "error"),
        Check("nth >= 0", min(p.nth1, p.nth2) >= 0, min(p.nth1, p.nth2), "error"),
        Check("zHO > 0", min(p.zHO1, p.zHO2) > 0, min(p.zHO1, p.zHO2), "error"),
        Check("weak coupling", r < WEAK_COUPLING_WARN, WEAK_COUPLING_WARN - r, "warning"),
    ]
    report = ValidationReport(tuple(checks), r)
    if raise_on_error and not report.ok:
        bad = [c.name for c in checks if c.severity == "error" and not c.passed]
        raise ParameterError("invalid parameters: " + "; ".join(bad))
    return report
