"""Real irreducible representations of SO(3).

Features are direct sums of degree-l blocks of dimension 2l+1. The basis is
the real spherical harmonic basis with components ordered m = -l..l and the
degree-1 block arranged as (y, z, x), so that the degree-1 Wigner matrix is
the rotation matrix conjugated by a fixed permutation. Spherical harmonics
use component normalization, ||Y^l(u)||^2 = 2l+1 for every unit u.

Conventions in one place:
  - l=0: Y^0 = [1]
  - l=1: Y^1 = sqrt(3) * (y, z, x)
  - l=2: sqrt(15)*xy, sqrt(15)*yz, sqrt(5)/2*(3z^2-1), sqrt(15)*zx,
         sqrt(15)/2*(x^2-y^2)
  - Wigner matrices satisfy Y^l(R u) = D^l(R) Y^l(u) and are orthogonal.
  - Clebsch-Gordan tensors are real, satisfy the selection rule and the
    equivariance identity D^l3 contract(x, y) = contract(D^l1 x, D^l2 y),
    and are normalized so the (0,0,0) tensor is exactly 1.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

# Closed forms below cover degrees 0..2; the parser ceiling defaults to the
# same bound but may be raised only if higher-degree tables are added.
LMAX_SUPPORTED = 2

_IRREPS_RE = re.compile(r"^\s*(\d+)\s*x\s*(\d+)\s*$")

# Permutation taking (x, y, z) coordinates to the (y, z, x) basis order.
PERM_YZX = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


class IrrepsError(ValueError):
    """Raised for malformed irreps specs or mismatched feature layouts."""


@dataclass(frozen=True)
class IrrepsSpec:
    """Ordered list of (multiplicity, degree) entries describing a feature layout."""

    entries: tuple[tuple[int, int], ...]

    @property
    def dim(self) -> int:
        return sum(mult * (2 * ell + 1) for mult, ell in self.entries)

    @property
    def num_channels(self) -> int:
        return sum(mult for mult, _ in self.entries)

    @property
    def lmax(self) -> int:
        return max((ell for _, ell in self.entries), default=0)

    def offsets(self) -> list[int]:
        """Start offset of each entry in the flat feature vector."""
        offs = [0]
        for mult, ell in self.entries:
            offs.append(offs[-1] + mult * (2 * ell + 1))
        return offs[:-1]

    def entry_slice(self, index: int) -> slice:
        mult, ell = self.entries[index]
        start = self.offsets()[index]
        return slice(start, start + mult * (2 * ell + 1))

    def mult_of_degree(self, ell: int) -> int:
        return sum(m for m, l in self.entries if l == ell)

    def __str__(self) -> str:
        return "+".join(f"{mult}x{ell}" for mult, ell in self.entries)


def parse_irreps(text: str, lmax: int = LMAX_SUPPORTED) -> IrrepsSpec:
    """Parse a spec string like "8x0+4x1+2x2".

    Grammar: mult "x" degree ("+" mult "x" degree)*. Degrees above `lmax`
    are rejected.
    """
    if not isinstance(text, str) or not text.strip():
        raise IrrepsError(f"empty irreps spec: {text!r}")
    entries = []
    for part in text.split("+"):
        m = _IRREPS_RE.match(part)
        if m is None:
            raise IrrepsError(f"malformed irreps entry {part!r} in {text!r}")
        mult, ell = int(m.group(1)), int(m.group(2))
        if mult < 1:
            raise IrrepsError(f"multiplicity must be positive in {part!r}")
        if ell > lmax:
            raise IrrepsError(f"degree {ell} exceeds maximum {lmax} in {text!r}")
        entries.append((mult, ell))
    return IrrepsSpec(tuple(entries))


@dataclass
class IrrepsArray:
    """A feature array structured by an IrrepsSpec.

    `data` has shape (..., spec.dim); leading axes batch over points,
    grasps or edges. `data` may be a plain ndarray or an autodiff node.
    """

    spec: IrrepsSpec
    data: object = field(repr=False)

    def __post_init__(self) -> None:
        dim = self.data.shape[-1]
        if dim != self.spec.dim:
            raise IrrepsError(
                f"data dim {dim} does not match spec {self.spec} (dim {self.spec.dim})"
            )

    @property
    def shape(self):
        return self.data.shape

    def entry(self, index: int) -> np.ndarray:
        """The (..., mult, 2l+1) view of one spec entry."""
        mult, ell = self.spec.entries[index]
        sl = self.spec.entry_slice(index)
        block = self.data[..., sl]
        return block.reshape(block.shape[:-1] + (mult, 2 * ell + 1))

    def degree_slice(self, ell: int) -> np.ndarray:
        """Concatenation of all entries of one degree, shape (..., mult_total, 2l+1)."""
        parts = [
            self.entry(i) for i, (_, l) in enumerate(self.spec.entries) if l == ell
        ]
        if not parts:
            raise IrrepsError(f"spec {self.spec} has no degree-{ell} entries")
        return np.concatenate(parts, axis=-2)


def _check_unit(u: np.ndarray, tol: float = 1e-6) -> None:
    n = np.linalg.norm(u, axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        bad = float(np.max(np.abs(n - 1.0)))
        raise ValueError(f"input direction not unit length (max deviation {bad:.3g})")


def spherical_harmonics(ell: int, u: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degree `ell` at unit vectors `u`.

    `u` has shape (..., 3); the result has shape (..., 2l+1) and satisfies
    ||Y^l(u)||^2 = 2l+1 exactly on the unit sphere.
    """
    u = np.asarray(u, dtype=float)
    _check_unit(u)
    return _sh_unchecked(ell, u)


def _sh_unchecked(ell: int, u: np.ndarray) -> np.ndarray:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    if ell == 0:
        return np.ones(u.shape[:-1] + (1,))
    if ell == 1:
        return math.sqrt(3.0) * np.stack([y, z, x], axis=-1)
    if ell == 2:
        s15 = math.sqrt(15.0)
        s5 = math.sqrt(5.0)
        return np.stack(
            [
                s15 * x * y,
                s15 * y * z,
                0.5 * s5 * (3.0 * z * z - 1.0),
                s15 * z * x,
                0.5 * s15 * (x * x - y * y),
            ],
            axis=-1,
        )
    raise ValueError(f"spherical harmonics implemented for degree <= {LMAX_SUPPORTED}, got {ell}")


# Fixed probe directions used to build degree-2 Wigner matrices: the identity
# Y^2(R u) = D^2(R) Y^2(u) over six independent probes pins D^2 exactly.
_D2_PROBES = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
    ]
)
_D2_PROBES /= np.linalg.norm(_D2_PROBES, axis=-1, keepdims=True)
_D2_PINV = np.linalg.pinv(_sh_unchecked(2, _D2_PROBES))


def check_rotation(R: np.ndarray, tol: float = 1e-8) -> None:
    R = np.asarray(R)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"matrix is not orthogonal (|R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if not np.all(np.abs(det - 1.0) <= 1e-6):
        raise ValueError("matrix has determinant != +1 (not a rotation)")


def wigner_d(ell: int, R: np.ndarray, *, checked: bool = True) -> np.ndarray:
    """The (2l+1)x(2l+1) real Wigner matrix of a rotation (batched over leading axes)."""
    R = np.asarray(R, dtype=float)
    if checked:
        check_rotation(R)
    if ell == 0:
        return np.ones(R.shape[:-2] + (1, 1))
    if ell == 1:
        return PERM_YZX @ R @ PERM_YZX.T
    if ell == 2:
        rotated = np.einsum("...ij,pj->...pi", R, _D2_PROBES)
        Y = _sh_unchecked(2, rotated)
        return np.swapaxes(_D2_PINV @ Y, -1, -2)
    raise ValueError(f"wigner_d implemented for degree <= {LMAX_SUPPORTED}, got {ell}")


@dataclass(frozen=True)
class CGTensor:
    """Dense real Clebsch-Gordan coupling tensor for one degree triple."""

    ell1: int
    ell2: int
    ell3: int
    values: np.ndarray

    def contract(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Couple (..., 2l1+1) with (..., 2l2+1) into (..., 2l3+1)."""
        return np.einsum("...i,...j,ijk->...k", x, y, self.values)


def _su2_cg_coeff(j1, m1, j2, m2, j3, m3) -> float:
    # Racah closed form for <j1 m1 j2 m2 | j3 m3>; exact for small degrees.
    if m3 != m1 + m2:
        return 0.0
    f = math.factorial
    pref = (2 * j3 + 1) * (
        f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3) / f(j1 + j2 + j3 + 1)
    )
    pref *= (
        f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    )
    total = 0.0
    k_lo = max(0, j2 - j3 - m1, j1 - j3 + m2)
    k_hi = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    for k in range(k_lo, k_hi + 1):
        denom = (
            f(k)
            * f(j1 + j2 - j3 - k)
            * f(j1 - m1 - k)
            * f(j2 + m2 - k)
            * f(j3 - j2 + m1 + k)
            * f(j3 - j1 - m2 + k)
        )
        total += (-1.0) ** k / denom
    return math.sqrt(pref) * total


def _su2_cg(j1: int, j2: int, j3: int) -> np.ndarray:
    out = np.zeros((2 * j1 + 1, 2 * j2 + 1, 2 * j3 + 1))
    for i1, m1 in enumerate(range(-j1, j1 + 1)):
        for i2, m2 in enumerate(range(-j2, j2 + 1)):
            for i3, m3 in enumerate(range(-j3, j3 + 1)):
                out[i1, i2, i3] = _su2_cg_coeff(j1, m1, j2, m2, j3, m3)
    return out


def _real_to_complex_basis(ell: int) -> np.ndarray:
    # Unitary change of basis from real to complex spherical harmonics, with
    # a (-i)^l phase so that coupled coefficients come out real.
    q = np.zeros((2 * ell + 1, 2 * ell + 1), dtype=np.complex128)
    for m in range(-ell, 0):
        q[ell + m, ell + abs(m)] = 1.0 / math.sqrt(2.0)
        q[ell + m, ell - abs(m)] = -1j / math.sqrt(2.0)
    q[ell, ell] = 1.0
    for m in range(1, ell + 1):
        q[ell + m, ell + abs(m)] = (-1.0) ** m / math.sqrt(2.0)
        q[ell + m, ell - abs(m)] = 1j * (-1.0) ** m / math.sqrt(2.0)
    return (-1j) ** ell * q


_CG_CACHE: dict[tuple[int, int, int], CGTensor] = {}


def cg_tensor(ell1: int, ell2: int, ell3: int) -> CGTensor:
    """Real Clebsch-Gordan tensor; zero outside the triangle selection rule. Cached."""
    key = (ell1, ell2, ell3)
    cached = _CG_CACHE.get(key)
    if cached is not None:
        return cached
    for ell in key:
        if ell < 0 or ell > LMAX_SUPPORTED:
            raise ValueError(f"degree {ell} outside supported range 0..{LMAX_SUPPORTED}")
    shape = (2 * ell1 + 1, 2 * ell2 + 1, 2 * ell3 + 1)
    if abs(ell1 - ell2) > ell3 or ell3 > ell1 + ell2:
        tensor = CGTensor(ell1, ell2, ell3, np.zeros(shape))
    else:
        C = _su2_cg(ell1, ell2, ell3)
        Q1 = _real_to_complex_basis(ell1)
        Q2 = _real_to_complex_basis(ell2)
        Q3 = _real_to_complex_basis(ell3)
        real = np.einsum("ij,kl,mn,ikn->jlm", Q1, Q2, np.conj(Q3.T), C)
        assert np.abs(real.imag).max() < 1e-12
        tensor = CGTensor(ell1, ell2, ell3, np.ascontiguousarray(real.real))
    _CG_CACHE[key] = tensor
    return tensor


def valid_degree_triples(lmax: int = LMAX_SUPPORTED):
    """All (l1, l2, l3) with degrees <= lmax satisfying the selection rule."""
    triples = []
    for l1 in range(lmax + 1):
        for l2 in range(lmax + 1):
            for l3 in range(lmax + 1):
                if abs(l1 - l2) <= l3 <= l1 + l2:
                    triples.append((l1, l2, l3))
    return triples


def block_diag_wigner(spec: IrrepsSpec, R: np.ndarray) -> np.ndarray:
    """Dense (dim, dim) block-diagonal Wigner matrix for a single rotation."""
    check_rotation(R)
    out = np.zeros(R.shape[:-2] + (spec.dim, spec.dim))
    offset = 0
    for mult, ell in spec.entries:
        D = wigner_d(ell, R, checked=False)
        w = 2 * ell + 1
        for c in range(mult):
            out[..., offset : offset + w, offset : offset + w] = D
            offset += w
    return out


def rotate_features(x: IrrepsArray, R: np.ndarray) -> IrrepsArray:
    """Apply the block-diagonal Wigner action of R to every channel of x.

    R may be a single rotation or a batch matching the leading axes of x.
    """
    R = np.asarray(R, dtype=float)
    check_rotation(R)
    parts = []
    for i, (mult, ell) in enumerate(x.spec.entries):
        block = x.entry(i)
        if ell == 0:
            parts.append(block.reshape(block.shape[:-2] + (mult,)))
            continue
        D = wigner_d(ell, R, checked=False)
        rotated = np.einsum("...ij,...cj->...ci", D, block)
        parts.append(rotated.reshape(rotated.shape[:-2] + (mult * (2 * ell + 1),)))
    return IrrepsArray(x.spec, np.concatenate(parts, axis=-1))


def channel_dot(x: IrrepsArray, y: IrrepsArray) -> np.ndarray:
    """Per-channel inner products <x^l_c, y^l_c>, shape (..., num_channels).

    Rotation-invariant because Wigner matrices are orthogonal.
    """
    if x.spec != y.spec:
        raise IrrepsError(f"spec mismatch: {x.spec} vs {y.spec}")
    parts = []
    for i in range(len(x.spec.entries)):
        parts.append(np.einsum("...cm,...cm->...c", x.entry(i), y.entry(i)))
    return np.concatenate(parts, axis=-1)
