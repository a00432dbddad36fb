"""Parameter-grid dictionary, SVD subspace basis, and dictionary matching.

The dictionary holds one simulated steady-state evolution per parameter
tuple (T1, T2, B1, IE) on a segmented grid. The temporal basis is the top-K
left singular vectors of the stacked evolutions; voxels are matched by
normalized inner product against the basis-projected atoms.

Because T2 enters a block only through the preparation factor applied at
the block start, all atoms sharing (T1, B1, IE) form an exact one-parameter
affine family e = c0 + s(T2) * c1. build_dictionary simulates the two block
responses per family and materializes atoms from them; compute_basis
accumulates the Gram matrix from the same factorization, which makes the
SVD of multi-million-entry dictionaries cheap without approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .signal_model import (
    N_READOUTS,
    BlockSchedule,
    block_response,
)

T1_SEGMENTS = ((300.0, 3000.0, 5.0), (3000.0, 5000.0, 100.0))
T2_SEGMENTS = ((10.0, 100.0, 1.0), (100.0, 200.0, 2.0), (200.0, 400.0, 10.0), (400.0, 500.0, 20.0))
B1_SEGMENTS = ((0.65, 1.35, 0.05),)
IE_SEGMENTS = ((0.5, 1.0, 0.02),)
DESK_COARSEN = 5.0


@dataclass(frozen=True)
class ParameterGrid:
    t1_values: np.ndarray
    t2_values: np.ndarray
    b1_values: np.ndarray
    ie_values: np.ndarray

    def __post_init__(self):
        for name in ("t1_values", "t2_values", "b1_values", "ie_values"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim != 1 or v.size == 0:
                raise ConfigError(f"{name} must be a nonempty 1-d array")
            if np.any(np.diff(v) <= 0):
                raise ConfigError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, v)


@dataclass
class Dictionary:
    """Atoms (n_atoms, T), per-atom params (n_atoms, 4) as [t1, t2, b1, ie]."""

    atoms: np.ndarray
    params: np.ndarray
    grid: ParameterGrid
    schedule: BlockSchedule
    ie_mode: str
    # exact affine factorization: atoms[i] = fac_c0[g] + fac_s[i] * fac_c1[g]
    fac_c0: np.ndarray | None = field(default=None, repr=False)
    fac_c1: np.ndarray | None = field(default=None, repr=False)
    fac_s: np.ndarray | None = field(default=None, repr=False)
    fac_group: np.ndarray | None = field(default=None, repr=False)
    _match_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_echoes(self) -> int:
        return self.atoms.shape[1]

    def b1_slice(self, b1_index: int) -> slice:
        """Atoms are ordered (b1, ie, t1, t2) with t2 fastest."""
        per_b1 = self.n_atoms // self.grid.b1_values.size
        return slice(b1_index * per_b1, (b1_index + 1) * per_b1)


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal temporal basis phi (T, K) plus all singular values."""

    phi: np.ndarray
    singular_values: np.ndarray

    @property
    def k(self) -> int:
        return self.phi.shape[1]


@dataclass(frozen=True)
class MatchResult:
    t1_ms: float
    t2_ms: float
    pd: complex
    b1_used: float
    ie_used: float
    score: float
    background: bool = False


def _segmented(segments, coarsen=1.0):
    vals = []
    for start, stop, step in segments:
        step = step * coarsen
        n = int(np.floor((stop - start) / step + 1e-9))
        vals.append(start + step * np.arange(n + 1))
    out = np.unique(np.round(np.concatenate(vals), 9))
    return out[out <= segments[-1][1] + 1e-9]


def build_grid(preset: str = "paper", t1=None, t2=None, b1=None, ie=None) -> ParameterGrid:
    """Segmented default grid; the desk preset widens every step 5x.

    Explicit value arrays override the corresponding preset axis.
    """
    if preset == "paper":
        c = 1.0
    elif preset == "desk":
        c = DESK_COARSEN
    else:
        raise ConfigError(f"unknown grid preset {preset!r}")
    return ParameterGrid(
        t1_values=np.asarray(t1, float) if t1 is not None else _segmented(T1_SEGMENTS, c),
        t2_values=np.asarray(t2, float) if t2 is not None else _segmented(T2_SEGMENTS, c),
        b1_values=np.asarray(b1, float) if b1 is not None else _segmented(B1_SEGMENTS, c),
        ie_values=np.asarray(ie, float) if ie is not None else _segmented(IE_SEGMENTS, c),
    )


def build_dictionary(
    grid: ParameterGrid,
    schedule: BlockSchedule,
    ie_mode: str = "full",
    ie_fixed: float = 0.8,
) -> Dictionary:
    """Simulate one atom per grid tuple (unit PD), ordered (b1, ie, t1, t2)."""
    if ie_mode == "full":
        ie_values = grid.ie_values
    elif ie_mode == "fixed":
        ie_values = np.asarray([ie_fixed], dtype=float)
    else:
        raise ConfigError(f"ie_mode must be 'full' or 'fixed', got {ie_mode!r}")
    t1v, t2v, b1v = grid.t1_values, grid.t2_values, grid.b1_values
    if min(t1v.size, t2v.size, b1v.size, ie_values.size) == 0:
        raise ConfigError("empty parameter grid")

    # groups share (b1, ie, t1); the t2 axis is closed-form within a group
    gb1, gie, gt1 = [a.ravel() for a in np.meshgrid(b1v, ie_values, t1v, indexing="ij")]
    sig0, slope, mend0, mend_slope = block_response(gt1, 1.0, gb1, gie, schedule)

    prep = np.exp(-schedule.timing.te_t2prep_ms / t2v)  # (nt2,)
    # steady start-of-block Mz: fixed point of m -> mend0 + mend_slope * prep * m
    m_start = mend0[:, None] / (1.0 - mend_slope[:, None] * prep[None, :])
    m_plus = (m_start * prep[None, :]).ravel()  # (n_groups * nt2,)

    n_groups, nt2 = gt1.size, t2v.size
    gidx = np.repeat(np.arange(n_groups), nt2)
    c0 = np.ascontiguousarray(sig0.T)  # (n_groups, T)
    c1 = np.ascontiguousarray(slope.T)
    atoms = c0[gidx] + m_plus[:, None] * c1[gidx]

    params = np.empty((atoms.shape[0], 4))
    params[:, 0] = np.repeat(gt1, nt2)
    params[:, 1] = np.tile(t2v, n_groups)
    params[:, 2] = np.repeat(gb1, nt2)
    params[:, 3] = np.repeat(gie, nt2)

    return Dictionary(
        atoms=atoms,
        params=params,
        grid=grid,
        schedule=schedule,
        ie_mode=ie_mode,
        fac_c0=c0,
        fac_c1=c1,
        fac_s=m_plus,
        fac_group=gidx,
    )


def _gram(d: Dictionary) -> np.ndarray:
    """atoms^T @ atoms, via the affine factorization when available."""
    if d.fac_c0 is None:
        g = d.atoms.T @ d.atoms
        return 0.5 * (g + g.T)
    n_groups = d.fac_c0.shape[0]
    s = d.fac_s.reshape(n_groups, -1)
    nt2 = s.shape[1]
    # per-group 2x2 moment matrix of [1, s]
    m = np.empty((n_groups, 2, 2))
    m[:, 0, 0] = nt2
    m[:, 0, 1] = m[:, 1, 0] = s.sum(axis=1)
    m[:, 1, 1] = (s * s).sum(axis=1)
    w = np.stack([d.fac_c0, d.fac_c1], axis=2)  # (G, T, 2)
    v = np.einsum("gti,gij->gtj", w, m)
    g = np.tensordot(v, w, axes=([0, 2], [0, 2]))  # (T, T)
    return 0.5 * (g + g.T)


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def compute_basis(d: Dictionary, k: int | None = None, err_pct: float | None = None) -> SubspaceBasis:
    """Top-K left singular vectors of the stacked evolutions (T x n_atoms).

    With err_pct, K is the smallest size whose relative Frobenius residual
    is at or below err_pct percent.
    """
    if (k is None) == (err_pct is None):
        raise ConfigError("specify exactly one of k or err_pct")
    t = d.n_echoes
    gram = _gram(d)
    evals, evecs = np.linalg.eigh(gram)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    n_sv = min(t, d.n_atoms)
    sv = np.sqrt(np.clip(evals[:n_sv], 0.0, None))

    if k is None:
        total = float(np.sum(np.clip(evals, 0.0, None)))
        if total == 0.0:
            k = 1
        else:
            tail = total - np.cumsum(np.clip(evals, 0.0, None))
            resid = np.sqrt(np.clip(tail, 0.0, None) / total) * 100.0
            k = int(np.searchsorted(-resid, -err_pct) + 1)
            k = min(max(k, 1), t)
    if not 1 <= k <= t:
        raise ConfigError(f"k must be in [1, {t}], got {k}")
    return SubspaceBasis(phi=_fix_signs(evecs[:, :k]), singular_values=sv)


def basis_error(d: Dictionary, basis: SubspaceBasis) -> float:
    """Relative Frobenius residual of the dictionary in percent."""
    total = float(np.sum(d.atoms * d.atoms))
    if total == 0.0:
        return 0.0
    proj = d.atoms @ basis.phi
    resid = max(total - float(np.sum(proj * proj)), 0.0)
    return 100.0 * np.sqrt(resid / total)


def project(evolution, basis: SubspaceBasis) -> np.ndarray:
    """Subspace coefficients phi^T e of a length-T evolution."""
    e = np.asarray(getattr(evolution, "values", evolution))
    return basis.phi.T @ e


def expand(coeffs, basis: SubspaceBasis) -> np.ndarray:
    """Length-T evolution phi x from subspace coefficients."""
    return basis.phi @ np.asarray(coeffs)


def snap_b1(grid: ParameterGrid, b1) -> np.ndarray:
    """Clamp to the grid range, then snap to the nearest grid value index."""
    b1 = np.clip(np.asarray(b1, dtype=float), grid.b1_values[0], grid.b1_values[-1])
    return np.argmin(np.abs(b1[..., None] - grid.b1_values), axis=-1)


def _projected_atoms(d: Dictionary, basis: SubspaceBasis):
    key = id(basis.phi)
    if key not in d._match_cache:
        proj = d.atoms @ basis.phi  # (n_atoms, K)
        norm2 = np.sum(proj * proj, axis=1)
        unit = proj / np.sqrt(np.maximum(norm2, 1e-300))[:, None]
        d._match_cache.clear()
        d._match_cache[key] = (proj, unit, norm2)
    return d._match_cache[key]


def _background_result(b1_used, ie_used) -> MatchResult:
    return MatchResult(
        t1_ms=0.0, t2_ms=0.0, pd=0j, b1_used=b1_used, ie_used=ie_used,
        score=0.0, background=True,
    )


def match_voxel(x, d: Dictionary, basis: SubspaceBasis, b1: float) -> MatchResult:
    """Match one K-vector of subspace coefficients to the dictionary.

    Candidates are the atoms at the nearest grid B1 (all IE values in full
    mode). The score is the normalized inner-product magnitude; PD is the
    complex least-squares scale against the raw projected atom.
    """
    x = np.asarray(x, dtype=complex).reshape(-1)
    bi = int(snap_b1(d.grid, np.array(b1)))
    b1_used = float(d.grid.b1_values[bi])
    if np.linalg.norm(x) == 0.0:
        return _background_result(b1_used, np.nan)
    proj, unit, norm2 = _projected_atoms(d, basis)
    sl = d.b1_slice(bi)
    inner = unit[sl] @ x
    best = int(np.argmax(np.abs(inner)))
    gbest = best + sl.start
    pd = complex(proj[gbest] @ x / max(norm2[gbest], 1e-300))
    return MatchResult(
        t1_ms=float(d.params[gbest, 0]),
        t2_ms=float(d.params[gbest, 1]),
        pd=pd,
        b1_used=b1_used,
        ie_used=float(d.params[gbest, 3]),
        score=float(np.abs(inner[best]) / np.linalg.norm(x)),
    )


def match_image(x_img, d: Dictionary, basis: SubspaceBasis, b1_map, chunk: int = 1024):
    """Voxelwise matching of a (K, Ny, Nz) coefficient image.

    Returns dict of maps: t1, t2, pd (complex), score, background (bool).
    """
    k, ny, nz = x_img.shape
    flat = np.asarray(x_img, dtype=complex).reshape(k, -1).T  # (nv, K)
    b_idx = snap_b1(d.grid, np.asarray(b1_map, dtype=float).reshape(-1))
    proj, unit, norm2 = _projected_atoms(d, basis)

    nv = flat.shape[0]
    t1 = np.zeros(nv)
    t2 = np.zeros(nv)
    pd = np.zeros(nv, dtype=complex)
    score = np.zeros(nv)
    bg = np.linalg.norm(flat, axis=1) == 0.0

    for bi in np.unique(b_idx):
        sel = np.flatnonzero((b_idx == bi) & ~bg)
        sl = d.b1_slice(int(bi))
        for lo in range(0, sel.size, chunk):
            vox = sel[lo:lo + chunk]
            inner = flat[vox] @ unit[sl].T
            best = np.argmax(np.abs(inner), axis=1)
            rows = np.arange(vox.size)
            gbest = best + sl.start
            xnorm = np.linalg.norm(flat[vox], axis=1)
            score[vox] = np.abs(inner[rows, best]) / xnorm
            pd[vox] = np.einsum("vk,vk->v", proj[gbest], flat[vox]) / np.maximum(norm2[gbest], 1e-300)
            t1[vox] = d.params[gbest, 0]
            t2[vox] = d.params[gbest, 1]

    shape = (ny, nz)
    return {
        "t1": t1.reshape(shape),
        "t2": t2.reshape(shape),
        "pd": pd.reshape(shape),
        "score": score.reshape(shape),
        "background": bg.reshape(shape),
    }


@dataclass
class FivePointDictionary:
    """Atoms reduced to the first echo of each readout, shape (n_atoms, 5)."""

    atoms5: np.ndarray
    params: np.ndarray
    grid: ParameterGrid
    _cache: dict = field(default_factory=dict, repr=False)

    def b1_slice(self, b1_index: int) -> slice:
        per_b1 = self.atoms5.shape[0] // self.grid.b1_values.size
        return slice(b1_index * per_b1, (b1_index + 1) * per_b1)


def derive_fivepoint(d: Dictionary) -> FivePointDictionary:
    """Reduce the full dictionary; nothing is re-simulated."""
    etl = d.schedule.timing.etl
    idx = np.arange(N_READOUTS) * etl
    return FivePointDictionary(
        atoms5=np.ascontiguousarray(d.atoms[:, idx]), params=d.params, grid=d.grid
    )


def _fivepoint_units(d5: FivePointDictionary):
    if "unit" not in d5._cache:
        norm2 = np.sum(d5.atoms5 * d5.atoms5, axis=1)
        d5._cache["norm2"] = norm2
        d5._cache["unit"] = d5.atoms5 / np.sqrt(np.maximum(norm2, 1e-300))[:, None]
    return d5._cache["unit"], d5._cache["norm2"]


def match_fivepoint(s, d5: FivePointDictionary, b1: float) -> MatchResult:
    """Match a complex 5-vector against the five-point atoms."""
    s = np.asarray(s, dtype=complex).reshape(-1)
    bi = int(snap_b1(d5.grid, np.array(b1)))
    b1_used = float(d5.grid.b1_values[bi])
    if np.linalg.norm(s) == 0.0:
        return _background_result(b1_used, np.nan)
    unit, norm2 = _fivepoint_units(d5)
    sl = d5.b1_slice(bi)
    inner = unit[sl] @ s
    best = int(np.argmax(np.abs(inner)))
    gbest = best + sl.start
    pd = complex(d5.atoms5[gbest] @ s / max(norm2[gbest], 1e-300))
    return MatchResult(
        t1_ms=float(d5.params[gbest, 0]),
        t2_ms=float(d5.params[gbest, 1]),
        pd=pd,
        b1_used=b1_used,
        ie_used=float(d5.params[gbest, 3]),
        score=float(np.abs(inner[best]) / np.linalg.norm(s)),
    )


def match_image_fivepoint(imgs5, d5: FivePointDictionary, b1_map, chunk: int = 1024):
    """Voxelwise five-point matching of (5, Ny, Nz) contrast images."""
    _, ny, nz = imgs5.shape
    flat = np.asarray(imgs5, dtype=complex).reshape(N_READOUTS, -1).T
    b_idx = snap_b1(d5.grid, np.asarray(b1_map, dtype=float).reshape(-1))
    unit, norm2 = _fivepoint_units(d5)

    nv = flat.shape[0]
    t1 = np.zeros(nv)
    t2 = np.zeros(nv)
    pd = np.zeros(nv, dtype=complex)
    score = np.zeros(nv)
    bg = np.linalg.norm(flat, axis=1) == 0.0

    for bi in np.unique(b_idx):
        sel = np.flatnonzero((b_idx == bi) & ~bg)
        sl = d5.b1_slice(int(bi))
        for lo in range(0, sel.size, chunk):
            vox = sel[lo:lo + chunk]
            inner = flat[vox] @ unit[sl].T
            best = np.argmax(np.abs(inner), axis=1)
            rows = np.arange(vox.size)
            gbest = best + sl.start
            xnorm = np.linalg.norm(flat[vox], axis=1)
            score[vox] = np.abs(inner[rows, best]) / xnorm
            pd[vox] = np.einsum("vk,vk->v", d5.atoms5[gbest], flat[vox]) / np.maximum(norm2[gbest], 1e-300)
            t1[vox] = d5.params[gbest, 0]
            t2[vox] = d5.params[gbest, 1]

    shape = (ny, nz)
    return {
        "t1": t1.reshape(shape),
        "t2": t2.reshape(shape),
        "pd": pd.reshape(shape),
        "score": score.reshape(shape),
        "background": bg.reshape(shape),
    }
