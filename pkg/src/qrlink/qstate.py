"""Exact two-qubit density-matrix engine.

Basis order is |00>, |01>, |10>, |11> with qubit order (node A, node B).
For time-bin qubits |0> is the early bin t1 and |1> the late bin t2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = {"I": I2, "X": X, "Y": Y, "Z": Z}


class InvalidStateError(ValueError):
    pass


class BellKind(enum.Enum):
    PSI_PLUS = "psi_plus"
    PSI_MINUS = "psi_minus"

    @property
    def sign(self) -> int:
        return 1 if self is BellKind.PSI_PLUS else -1

    @classmethod
    def from_sign(cls, sign: int) -> "BellKind":
        return cls.PSI_PLUS if sign > 0 else cls.PSI_MINUS


class DensityMatrix:
    """Immutable, validated 4x4 two-qubit density matrix."""

    __slots__ = ("_data",)

    def __init__(self, data, *, check: bool = True):
        arr = np.array(data, dtype=complex)
        if arr.shape != (4, 4):
            raise InvalidStateError(f"expected a 4x4 matrix, got shape {arr.shape}")
        if check:
            _check_physical(arr)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __repr__(self) -> str:
        return f"DensityMatrix({np.round(self._data, 6)!r})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DensityMatrix):
            return NotImplemented
        return bool(np.array_equal(self._data, other._data))

    def __hash__(self) -> int:
        return hash(self._data.tobytes())

    def allclose(self, other: "DensityMatrix", atol: float = 1e-12) -> bool:
        return bool(np.allclose(self._data, other.data, atol=atol, rtol=0))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self._data)

    def trace_distance(self, other: "DensityMatrix") -> float:
        ev = np.linalg.eigvalsh(self._data - other.data)
        return 0.5 * float(np.sum(np.abs(ev)))

    def to_text(self) -> str:
        """Serialize as 16 row-major ``re,im`` pairs, one per line."""
        return "".join(f"{z.real:.17g},{z.imag:.17g}\n" for z in self._data.ravel())

    @classmethod
    def from_text(cls, text: str) -> "DensityMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 16:
            raise InvalidStateError(f"expected 16 entries, got {len(lines)}")
        vals = []
        for ln in lines:
            re, im = ln.split(",")
            vals.append(complex(float(re), float(im)))
        return cls(np.array(vals).reshape(4, 4))


def _check_physical(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError("matrix has non-finite entries")
    if np.max(np.abs(arr - arr.conj().T)) > HERMITIAN_TOL:
        raise InvalidStateError("matrix is not Hermitian")
    tr = np.trace(arr)
    if abs(tr - 1) > TRACE_TOL:
        raise InvalidStateError(f"trace is {tr.real:.3g}, expected 1")
    if np.linalg.eigvalsh(arr).min() < -PSD_TOL:
        raise InvalidStateError("matrix is not positive semidefinite")


def _hermitize(arr: np.ndarray) -> np.ndarray:
    # kills rounding-level anti-Hermitian parts before validation
    return 0.5 * (arr + arr.conj().T)


def as_density(rho) -> DensityMatrix:
    return rho if isinstance(rho, DensityMatrix) else DensityMatrix(rho)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(a, b)


def bell_vector(kind: BellKind) -> np.ndarray:
    v = np.zeros(4, dtype=complex)
    v[1] = 1.0
    v[2] = kind.sign
    return v / np.sqrt(2)


def bell_state(kind: BellKind) -> DensityMatrix:
    v = bell_vector(kind)
    return DensityMatrix(np.outer(v, v.conj()))


def maximally_mixed() -> DensityMatrix:
    return DensityMatrix(np.eye(4) / 4)


def pure_state(vec) -> DensityMatrix:
    v = np.asarray(vec, dtype=complex)
    v = v / np.linalg.norm(v)
    return DensityMatrix(np.outer(v, v.conj()))


def mixture(states: Iterable, weights: Iterable[float]) -> DensityMatrix:
    """Convex combination of states; weights are normalised."""
    w = np.asarray(list(weights), dtype=float)
    mats = np.array([np.asarray(as_density(s).data) for s in states])
    if w.size == 0 or w.sum() <= 0 or np.any(w < 0):
        raise ValueError("weights must be non-negative with positive sum")
    out = np.tensordot(w / w.sum(), mats, axes=1)
    return DensityMatrix(_hermitize(out))


def werner(p: float, kind: BellKind = BellKind.PSI_PLUS) -> DensityMatrix:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Werner weight must lie in [0, 1], got {p}")
    return DensityMatrix(p * bell_state(kind).data + (1 - p) * np.eye(4) / 4)


def _check_observable(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=complex)
    if obs.shape != (2, 2):
        raise ValueError("single-qubit observable must be 2x2")
    if np.max(np.abs(obs - obs.conj().T)) > HERMITIAN_TOL:
        raise ValueError("observable is not Hermitian")
    ev = np.linalg.eigvalsh(obs)
    if not np.allclose(ev, [-1.0, 1.0], atol=1e-9):
        raise ValueError(f"observable spectrum must be {{-1, +1}}, got {ev}")
    return obs


def expectation(rho, obs_a, obs_b) -> float:
    """Tr(rho . obs_a (x) obs_b) for two +/-1-valued single-qubit observables."""
    a = _check_observable(obs_a)
    b = _check_observable(obs_b)
    val = np.trace(as_density(rho).data @ np.kron(a, b))
    if abs(val.imag) > 1e-10:
        raise ArithmeticError(f"expectation has imaginary part {val.imag:.3g}")
    return float(val.real)


def pauli_expectation(rho, label: str) -> float:
    """Expectation of a two-site Pauli string such as ``"XZ"`` or ``"IY"``."""
    if len(label) != 2 or any(c not in PAULI for c in label):
        raise ValueError(f"bad Pauli label {label!r}")
    val = np.trace(as_density(rho).data @ np.kron(PAULI[label[0]], PAULI[label[1]]))
    return float(val.real)


def witness_fidelity(xx: float, yy: float, zz: float, sign: int) -> float:
    """Projector expectation (1 - <ZZ> +/- <XX> +/- <YY>) / 4."""
    for name, v in (("xx", xx), ("yy", yy), ("zz", zz)):
        if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
            raise ValueError(f"correlator {name}={v} outside [-1, 1]")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return (1.0 - zz + sign * (xx + yy)) / 4.0


def fidelity_to_bell(rho, kind: BellKind) -> float:
    v = bell_vector(kind)
    return float(np.real(v.conj() @ as_density(rho).data @ v))


@dataclass(frozen=True)
class MeasurementSetting:
    """A pair of single-qubit +/-1 observables given as unit Bloch vectors (x, y, z)."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]

    def __post_init__(self):
        for name in ("a", "b"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (3,) or abs(np.linalg.norm(vec) - 1) > 1e-9:
                raise ValueError(f"observable {name} must be a unit 3-vector, got {vec}")
            object.__setattr__(self, name, tuple(float(c) for c in vec))

    @property
    def obs_a(self) -> np.ndarray:
        return bloch_observable(self.a)

    @property
    def obs_b(self) -> np.ndarray:
        return bloch_observable(self.b)

    @classmethod
    def pauli(cls, label: str) -> "MeasurementSetting":
        return cls(_AXES[label[0]], _AXES[label[1]])

    @property
    def label(self) -> str:
        inv = {v: k for k, v in _AXES.items()}
        la = inv.get(self.a)
        lb = inv.get(self.b)
        if la and lb:
            return la + lb
        return f"{_fmt_vec(self.a)}|{_fmt_vec(self.b)}"


_AXES = {
    "X": (1.0, 0.0, 0.0),
    "Y": (0.0, 1.0, 0.0),
    "Z": (0.0, 0.0, 1.0),
    "-X": (-1.0, 0.0, 0.0),
    "-Y": (0.0, -1.0, 0.0),
    "-Z": (0.0, 0.0, -1.0),
}


def _fmt_vec(v) -> str:
    return "(" + ",".join(f"{c:.6g}" for c in v) + ")"


def bloch_observable(vec) -> np.ndarray:
    x, y, z = vec
    return x * X + y * Y + z * Z


@dataclass(frozen=True)
class ChshSettings:
    a0: tuple[float, float, float]
    a1: tuple[float, float, float]
    b0: tuple[float, float, float]
    b1: tuple[float, float, float]

    def pairs(self) -> tuple[MeasurementSetting, ...]:
        """Settings in the order A0B0, A0B1, A1B0, A1B1."""
        return (
            MeasurementSetting(self.a0, self.b0),
            MeasurementSetting(self.a0, self.b1),
            MeasurementSetting(self.a1, self.b0),
            MeasurementSetting(self.a1, self.b1),
        )


_R2 = 1 / np.sqrt(2)
# A0 = (Z+X)/sqrt2, A1 = (Z-X)/sqrt2, B0 = -Z, B1 = X
BELL_TEST_SETTINGS = ChshSettings(
    a0=(_R2, 0.0, _R2),
    a1=(-_R2, 0.0, _R2),
    b0=(0.0, 0.0, -1.0),
    b1=(1.0, 0.0, 0.0),
)

CHSH_SIGNS = (1, 1, 1, -1)


def chsh_value(rho, settings: ChshSettings = BELL_TEST_SETTINGS) -> float:
    rho = as_density(rho)
    return float(
        sum(s * expectation(rho, m.obs_a, m.obs_b) for s, m in zip(CHSH_SIGNS, settings.pairs()))
    )


def _conjugate(rho, u: np.ndarray) -> DensityMatrix:
    out = u @ as_density(rho).data @ u.conj().T
    return DensityMatrix(_hermitize(out))


_FLIP_A = np.diag([1, 1, -1, -1]).astype(complex)


def apply_phase_flip_a(rho) -> DensityMatrix:
    """pi phase on node A's late bin; maps psi- <-> psi+."""
    return _conjugate(rho, _FLIP_A)


def dephase_relative(rho, delta_phi: float) -> DensityMatrix:
    """Phase e^{i delta_phi} on the |10> amplitude (|01> is the phase reference).

    Only the relative phase between |01> and |10> is physical; the global-phase
    choice here leaves fidelities unchanged.
    """
    u = np.diag([1, 1, np.exp(1j * delta_phi), 1])
    return _conjugate(rho, u)


def project_to_physical(mat: np.ndarray) -> np.ndarray:
    """Nearest unit-trace PSD matrix by eigenvalue clipping.

    Negative eigenvalues are zeroed one at a time from the bottom and their
    total is spread evenly over the remaining ones until none is negative.
    """
    mat = _hermitize(np.asarray(mat, dtype=complex))
    mat = mat / np.trace(mat).real
    vals, vecs = np.linalg.eigh(mat)
    order = np.argsort(vals)[::-1]
    vals = vals[order].copy()
    vecs = vecs[:, order]
    d = len(vals)
    deficit = 0.0
    i = d
    while i > 0 and vals[i - 1] + deficit / i < 0:
        deficit += vals[i - 1]
        vals[i - 1] = 0.0
        i -= 1
    vals[:i] += deficit / i
    out = (vecs * vals) @ vecs.conj().T
    return _hermitize(out / np.trace(out).real)


PAULI_BASES = tuple(a + b for a in "XYZ" for b in "XYZ")


def tomography_reconstruct(tallies: Mapping) -> DensityMatrix:
    """Linear-inversion tomography over the nine Pauli bases.

    ``tallies`` maps each label in ``PAULI_BASES`` (or an equivalent
    MeasurementSetting) to counts (N++, N+-, N-+, N--). Single-site terms are
    estimated by pooling all bases sharing that site's Pauli.
    """
    from .tallies import TallyTable

    table = tallies if isinstance(tallies, TallyTable) else TallyTable(tallies)
    counts = {}
    for lab in PAULI_BASES:
        c = table.get(MeasurementSetting.pauli(lab))
        if c is None:
            raise ValueError(f"tomography needs basis {lab}")
        if c.sum() <= 0:
            raise ValueError(f"basis {lab} has zero counts")
        counts[lab] = c

    def corr(c):
        return (c[0] - c[1] - c[2] + c[3]) / c.sum()

    T = {("I", "I"): 1.0}
    for lab, c in counts.items():
        T[(lab[0], lab[1])] = corr(c)
    for p in "XYZ":
        ca = sum(counts[p + q] for q in "XYZ")
        cb = sum(counts[q + p] for q in "XYZ")
        T[(p, "I")] = (ca[0] + ca[1] - ca[2] - ca[3]) / ca.sum()
        T[("I", p)] = (cb[0] - cb[1] + cb[2] - cb[3]) / cb.sum()
    lin = sum(v * np.kron(PAULI[a], PAULI[b]) for (a, b), v in T.items()) / 4
    return DensityMatrix(project_to_physical(lin))


def outcome_probabilities(rho, setting: MeasurementSetting) -> np.ndarray:
    """Born probabilities for (+,+), (+,-), (-,+), (-,-)."""
    projs = setting_projectors(setting)
    r = as_density(rho).data
    p = np.array([np.trace(r @ P).real for P in projs])
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def setting_projectors(setting: MeasurementSetting) -> list[np.ndarray]:
    pa = [(I2 + s * setting.obs_a) / 2 for s in (1, -1)]
    pb = [(I2 + s * setting.obs_b) / 2 for s in (1, -1)]
    return [np.kron(pa[i], pb[j]) for i in (0, 1) for j in (0, 1)]


def random_density_matrix(rng: np.random.Generator, rank: int | None = None) -> DensityMatrix:
    """Random state from the induced (Ginibre) measure."""
    k = rank or 4
    g = rng.normal(size=(4, k)) + 1j * rng.normal(size=(4, k))
    m = g @ g.conj().T
    return DensityMatrix(_hermitize(m / np.trace(m).real))


def correlators(rho) -> tuple[float, float, float]:
    """Exact (<XX>, <YY>, <ZZ>)."""
    return tuple(pauli_expectation(rho, lab) for lab in ("XX", "YY", "ZZ"))


def stack(states: Sequence) -> np.ndarray:
    return np.array([as_density(s).data for s in states])
