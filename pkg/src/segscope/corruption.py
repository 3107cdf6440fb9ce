"""Parametric MRI corruption operators and sweep schedules.

Operator semantics follow the standard definitions: magnitude-MR Rician
noise, radial k-space truncation for Gibbs ringing, an exponential
polynomial bias field, and k-space point spikes. Every operator is a pure
function of (input, magnitude, seed); zero magnitude is the identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .volume import GridVolume

__all__ = [
    "NoiseSpec",
    "NoiseSchedule",
    "NOISE_KINDS",
    "APPLY_ORDER",
    "apply_rician",
    "apply_gibbs",
    "apply_bias_field",
    "apply_spike",
    "apply_noise",
    "apply_combined",
    "schedule",
    "stable_hash64",
    "derive_seed",
]

NOISE_KINDS = ("rician", "gibbs", "bias", "spike")
# combined corruption always applies in this order
APPLY_ORDER = ("bias", "gibbs", "rician", "spike")


def stable_hash64(text: str) -> int:
    """Stable 64-bit hash of a string (process- and platform-independent)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(base_seed: int, *parts: str) -> int:
    """Deterministic per-item seed: base XOR hash of the joined name parts."""
    return (int(base_seed) ^ stable_hash64("\x1f".join(parts))) % 2**64


@dataclass(frozen=True)
class NoiseSpec:
    """One corruption: kind, magnitude (sigma / alpha / coefficient bound /
    relative spike intensity), and the RNG seed."""

    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if self.kind == "gibbs" and self.magnitude > 1:
            raise ValueError("gibbs alpha must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSpec":
        return cls(kind=obj["kind"], magnitude=float(obj["magnitude"]), seed=int(obj.get("seed", 0)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Linearly spaced magnitudes from 0 to the maximum, inclusive.

    For ``kind="combined"`` the magnitudes are fractions in [0, 1] scaling
    each component's maximum (``components`` maps kind -> max magnitude).
    """

    kind: str
    max_magnitude: float
    n_steps: int
    components: dict | None = None
    magnitudes: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind != "combined" and self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.n_steps < 2:
            raise ValueError("schedule needs at least 2 steps")
        if self.max_magnitude < 0:
            raise ValueError("max magnitude must be >= 0")
        if self.kind == "combined" and not self.components:
            raise ValueError("combined schedule requires component maxima")
        mags = tuple(np.linspace(0.0, self.max_magnitude, self.n_steps).tolist())
        object.__setattr__(self, "magnitudes", mags)

    def specs_at(self, step: int, seed: int) -> list[NoiseSpec]:
        """Corruption specs for one increment (one spec per component)."""
        m = self.magnitudes[step]
        if self.kind == "combined":
            return [
                NoiseSpec(kind=k, magnitude=m * self.components[k], seed=derive_seed(seed, k))
                for k in APPLY_ORDER if k in self.components
            ]
        return [NoiseSpec(kind=self.kind, magnitude=m, seed=seed)]

    def to_json(self) -> dict:
        out = {"kind": self.kind, "max_magnitude": self.max_magnitude, "n_steps": self.n_steps}
        if self.components:
            out["components"] = dict(self.components)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        return cls(
            kind=obj["kind"], max_magnitude=float(obj.get("max_magnitude", 1.0)),
            n_steps=int(obj["n_steps"]), components=obj.get("components"),
        )


def schedule(kind: str, max_magnitude: float, n_steps: int, components: dict | None = None) -> NoiseSchedule:
    return NoiseSchedule(kind=kind, max_magnitude=max_magnitude, n_steps=n_steps, components=components)


def apply_rician(v: GridVolume, sigma: float, seed: int = 0) -> GridVolume:
    """Magnitude-MR noise: sqrt((v + n1)^2 + n2^2), n1,n2 iid N(0, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return v.with_data(v.data.copy())
    rng = np.random.default_rng(seed)
    n1 = rng.normal(0.0, sigma, size=v.dims)
    n2 = rng.normal(0.0, sigma, size=v.dims)
    return v.with_data(np.sqrt((v.data + n1) ** 2 + n2 ** 2))


def _radial_fraction(dims: tuple[int, int, int]) -> np.ndarray:
    """Centered k-space radius, normalized so the extreme corner bin is 1."""
    axes = []
    active = 0
    for n in dims:
        k = np.fft.fftfreq(n) * n  # integer-valued centered frequencies
        kmax = np.abs(k).max()
        if kmax > 0:
            axes.append(k / kmax)
            active += 1
        else:
            axes.append(k)  # singleton axis contributes 0
    kx, ky, kz = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(kx ** 2 + ky ** 2 + kz ** 2)
    return r / np.sqrt(max(active, 1))


def apply_gibbs(v: GridVolume, alpha: float) -> GridVolume:
    """Truncate k-space radially: bins with normalized radius > (1 - alpha)
    are zeroed, then the volume is reconstructed by inverse FFT (real part).
    alpha=0 removes nothing; alpha=1 keeps only DC (the volume mean)."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    spectrum = np.fft.fftn(v.data)
    spectrum[_radial_fraction(v.dims) > (1.0 - alpha)] = 0.0
    return v.with_data(np.real(np.fft.ifftn(spectrum)))


def _monomial_exponents(degree: int) -> list[tuple[int, int, int]]:
    out = []
    for total in range(degree + 1):
        for px in range(total + 1):
            for py in range(total - px + 1):
                out.append((px, py, total - px - py))
    return out


def apply_bias_field(v: GridVolume, degree: int = 3, coeff_bound: float = 0.5, seed: int = 0) -> GridVolume:
    """Multiply by exp(polynomial) with coefficients ~ U(-c, c).

    Monomials run over all exponent triples of total degree <= ``degree`` in
    coordinates normalized to [-1, 1], in a fixed (degree, px, py, pz) order
    so the field is deterministic given the seed.
    """
    if coeff_bound < 0:
        raise ValueError("coefficient bound must be >= 0")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    exps = _monomial_exponents(degree)
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(-coeff_bound, coeff_bound, size=len(exps))
    coords = [
        np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        for n in v.dims
    ]
    xs, ys, zs = np.meshgrid(*coords, indexing="ij")
    log_field = np.zeros(v.dims)
    for c, (px, py, pz) in zip(coeffs, exps):
        log_field += c * xs ** px * ys ** py * zs ** pz
    return v.with_data(v.data * np.exp(log_field))


def apply_spike(v: GridVolume, kappa: float, n_spikes: int = 1, seed: int = 0) -> GridVolume:
    """Set random non-DC k-space bins to magnitude kappa * max|K| with random
    phase, keeping the spectrum Hermitian so the output stays real."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if n_spikes < 0:
        raise ValueError("n_spikes must be >= 0")
    if kappa == 0 or n_spikes == 0:
        return v.with_data(v.data.copy())
    spectrum = np.fft.fftn(v.data)
    peak = np.abs(spectrum).max()
    rng = np.random.default_rng(seed)
    nx, ny, nz = v.dims
    placed = 0
    while placed < n_spikes:
        i, j, k = (int(rng.integers(nx)), int(rng.integers(ny)), int(rng.integers(nz)))
        conj = ((-i) % nx, (-j) % ny, (-k) % nz)
        if (i, j, k) == (0, 0, 0) or (i, j, k) == conj:
            continue  # skip DC and self-conjugate (Nyquist) bins
        phase = rng.uniform(0.0, 2.0 * np.pi)
        value = kappa * peak * np.exp(1j * phase)
        spectrum[i, j, k] = value
        spectrum[conj] = np.conj(value)
        placed += 1
    return v.with_data(np.real(np.fft.ifftn(spectrum)))


def apply_noise(v: GridVolume, spec: NoiseSpec) -> GridVolume:
    if spec.kind == "rician":
        return apply_rician(v, spec.magnitude, spec.seed)
    if spec.kind == "gibbs":
        return apply_gibbs(v, spec.magnitude)
    if spec.kind == "bias":
        return apply_bias_field(v, coeff_bound=spec.magnitude, seed=spec.seed)
    if spec.kind == "spike":
        return apply_spike(v, spec.magnitude, seed=spec.seed)
    raise ValueError(f"unknown noise kind {spec.kind!r}")


def apply_combined(v: GridVolume, specs: list[NoiseSpec]) -> GridVolume:
    """Apply corruptions in the fixed order bias -> gibbs -> rician -> spike,
    regardless of the list order."""
    ordered = sorted(specs, key=lambda s: APPLY_ORDER.index(s.kind))
    out = v
    for spec in ordered:
        out = apply_noise(out, spec)
    return out
