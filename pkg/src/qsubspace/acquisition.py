"""Sampling masks, echo ordering, synthetic coils, and the subspace
forward model.

The reconstruction plane is the 2D phase-encode grid (ky, kz); the readout
dimension is outside the operator. All DFTs are centered and unitary, so
the adjoint equals the inverse on full sampling.

Acquired k-space is kept sparse: an AcquisitionModel carries a flat sample
table (echo, ky, kz) and k-space data is an (n_samples, n_coils) complex
array aligned with that table. The normal operator uses the precomputed
per-point K x K spatio-temporal kernel, which needs only K*L transforms
per application instead of T*L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .signal_model import N_READOUTS, BlockSchedule, simulate_evolution_batch
from .dictionary import SubspaceBasis

UNIFORM_SHIFTS = ((0, 0), (1, 0), (0, 1), (1, 1), (1, 0))


def fft2c(x):
    """Centered unitary 2D DFT over the last two axes."""
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def ifft2c(x):
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


@dataclass(frozen=True)
class SamplingMask:
    """Per-contrast boolean sampling grids, (5, Ny, Nz)."""

    masks: np.ndarray
    ry: float
    rz: float
    pattern: str
    seed: int

    def __post_init__(self):
        if self.masks.shape[0] != N_READOUTS:
            raise ConfigError("expected one mask per contrast (5)")
        counts = self.masks.reshape(N_READOUTS, -1).sum(axis=1)
        if np.any(counts == 0):
            raise ConfigError("every contrast needs at least one sample")


@dataclass(frozen=True)
class EchoOrdering:
    """Dense within-readout echo index per contrast, -1 where unsampled."""

    echo_index: np.ndarray  # (5, Ny, Nz) int32
    etl: int


@dataclass(frozen=True)
class CoilSet:
    maps: np.ndarray  # (L, Ny, Nz) complex

    def __post_init__(self):
        sos = np.sum(np.abs(self.maps) ** 2, axis=0)
        if np.any(np.abs(sos - 1.0) > 1e-6):
            raise ConfigError("coil maps must be SoS-normalized to 1")

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


@dataclass
class AcquisitionModel:
    """Flat sample table + coils + temporal basis.

    Samples are sorted by (echo, ky, kz); echo is the global index
    contrast * etl + within-readout echo.
    """

    echo: np.ndarray  # (S,) int32, global echo index in [0, T)
    iy: np.ndarray  # (S,) int32
    iz: np.ndarray  # (S,) int32
    coils: CoilSet
    phi: np.ndarray  # (T, K)
    etl: int
    dims: tuple
    _kernel: np.ndarray | None = field(default=None, repr=False)
    _phi_rows: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.echo.size

    @property
    def n_echoes(self) -> int:
        return self.phi.shape[0]

    @property
    def k(self) -> int:
        return self.phi.shape[1]

    @property
    def phi_rows(self) -> np.ndarray:
        if self._phi_rows is None:
            self._phi_rows = self.phi[self.echo]
        return self._phi_rows

    @property
    def kernel(self) -> np.ndarray:
        if self._kernel is None:
            self._kernel = precompute_kernel(self)
        return self._kernel

    def contrast_of_samples(self) -> np.ndarray:
        return self.echo // self.etl

    def subset(self, index) -> "AcquisitionModel":
        """New model restricted to a subset of the sample table."""
        return AcquisitionModel(
            echo=self.echo[index],
            iy=self.iy[index],
            iz=self.iz[index],
            coils=self.coils,
            phi=self.phi,
            etl=self.etl,
            dims=self.dims,
        )


def make_uniform_mask(dims, ry: int, rz: int, seed: int = 0) -> SamplingMask:
    """Regular (ry, rz) lattice; the five contrasts use the fixed shift
    pattern (0,0), (1,0), (0,1), (1,1), (1,0)."""
    ny, nz = dims
    iy = np.arange(ny)[:, None]
    iz = np.arange(nz)[None, :]
    masks = np.stack(
        [((iy - sy) % ry == 0) & ((iz - sz) % rz == 0) for sy, sz in UNIFORM_SHIFTS]
    )
    return SamplingMask(masks=masks, ry=float(ry), rz=float(rz), pattern="uniform", seed=seed)


def _disc_offsets(radius: float):
    r = int(np.ceil(radius))
    dy, dz = np.mgrid[-r : r + 1, -r : r + 1]
    keep = (dy * dy + dz * dz) <= radius * radius
    return dy[keep], dz[keep]


def _poisson_single(dims, target: int, order: np.ndarray, density: np.ndarray, center_block):
    """Dart throwing with a variable exclusion radius, bisected to target."""
    ny, nz = dims
    cy, cz = center_block

    def throw(r0):
        occupied = np.zeros((ny, nz), dtype=bool)
        occupied[cy, cz] = True
        radii = r0 * density
        cache = {}
        for flat in order:
            y, z = divmod(int(flat), nz)
            if occupied[y, z]:
                continue
            r = radii[y, z]
            key = round(r, 3)
            if key not in cache:
                cache[key] = _disc_offsets(r)
            dy, dz = cache[key]
            yy = y + dy
            zz = z + dz
            ok = (yy >= 0) & (yy < ny) & (zz >= 0) & (zz < nz)
            if not occupied[yy[ok], zz[ok]].any():
                occupied[y, z] = True
        return occupied

    lo, hi = 0.3, 4.0 * np.sqrt(ny * nz / max(target, 1))
    best = None
    for _ in range(14):
        mid = 0.5 * (lo + hi)
        occ = throw(mid)
        n = int(occ.sum())
        if best is None or abs(n - target) < abs(best[1] - target):
            best = (occ, n)
        if abs(n - target) <= max(1, int(0.02 * target)):
            break
        if n > target:
            lo = mid
        else:
            hi = mid
    return best[0]


def make_poisson_mask(
    dims,
    ry: float,
    rz: float,
    jitter_pct: float = 1.0,
    seed: int = 0,
    center: int = 4,
) -> SamplingMask:
    """Variable-density Poisson-disc masks, one independent draw per
    contrast.

    Each contrast jitters the nominal (ry, rz) uniformly within
    +-jitter_pct percent, so the five patterns are complementary. A
    center x center block at the k-space origin is always fully sampled.
    The achieved acceleration is trimmed to within 5% of nominal.
    """
    ny, nz = dims
    cyc, czc = ny // 2, nz // 2
    yy, zz = np.mgrid[0:ny, 0:nz]
    rho = np.hypot(yy - cyc, zz - czc)
    density = 0.35 + 1.3 * rho / max(rho.max(), 1.0)
    cy = slice(max(cyc - center // 2, 0), min(cyc + (center + 1) // 2, ny))
    cz = slice(max(czc - center // 2, 0), min(czc + (center + 1) // 2, nz))

    masks = np.zeros((N_READOUTS, ny, nz), dtype=bool)
    for c in range(N_READOUTS):
        rng = np.random.default_rng([seed, c])
        f = jitter_pct / 100.0
        ry_eff = ry * (1.0 + rng.uniform(-f, f))
        rz_eff = rz * (1.0 + rng.uniform(-f, f))
        target = int(round(ny * nz / (ry_eff * rz_eff)))
        order = rng.permutation(ny * nz)
        occ = _poisson_single(dims, target, order, density, (cy, cz))

        # trim or pad to land within 5% of the nominal acceleration
        n = int(occ.sum())
        lo_n, hi_n = int(np.ceil(0.96 * target)), int(np.floor(1.04 * target))
        if n > hi_n:
            removable = np.flatnonzero(occ.ravel())
            keep_block = np.zeros_like(occ)
            keep_block[cy, cz] = True
            removable = removable[~keep_block.ravel()[removable]]
            drop = rng.choice(removable, size=n - hi_n, replace=False)
            occ.ravel()[drop] = False
        elif n < lo_n:
            empty = np.flatnonzero(~occ.ravel())
            add = rng.choice(empty, size=lo_n - n, replace=False)
            occ.ravel()[add] = True
        masks[c] = occ

    return SamplingMask(masks=masks, ry=float(ry), rz=float(rz), pattern="poisson", seed=seed)


def replicate_contrast(mask: SamplingMask, contrast: int = 0) -> SamplingMask:
    """Same sampling pattern for every contrast (no echo shifts)."""
    masks = np.broadcast_to(mask.masks[contrast], mask.masks.shape).copy()
    return SamplingMask(
        masks=masks, ry=mask.ry, rz=mask.rz, pattern=mask.pattern + "-identical", seed=mask.seed
    )


def assign_echo_ordering(mask: SamplingMask, etl: int) -> EchoOrdering:
    """Center-out ordering: ranks sorted by distance from the k-space
    center (ties by (ky, kz)), interleaved over shots = ceil(count/etl)."""
    _, ny, nz = mask.masks.shape
    cy, cz = ny // 2, nz // 2
    echo_index = np.full((N_READOUTS, ny, nz), -1, dtype=np.int32)
    for c in range(N_READOUTS):
        pts = np.argwhere(mask.masks[c])
        dist = np.hypot(pts[:, 0] - cy, pts[:, 1] - cz)
        order = np.lexsort((pts[:, 1], pts[:, 0], dist))
        shots = int(np.ceil(pts.shape[0] / etl))
        ranks = np.arange(pts.shape[0])
        echoes = np.minimum(ranks // shots, etl - 1)
        sel = pts[order]
        echo_index[c, sel[:, 0], sel[:, 1]] = echoes
    return EchoOrdering(echo_index=echo_index, etl=etl)


def synth_coils(n_coils: int, dims, seed: int = 0) -> CoilSet:
    """Smooth synthetic receive maps: Gaussian magnitude lobes placed
    around the FOV with linear phase ramps, SoS-normalized voxelwise."""
    ny, nz = dims
    rng = np.random.default_rng(seed)
    yy, zz = np.mgrid[0:ny, 0:nz]
    maps = np.empty((n_coils, ny, nz), dtype=complex)
    for l in range(n_coils):
        ang = 2.0 * np.pi * l / n_coils + rng.uniform(-0.15, 0.15)
        cy = ny / 2 + 0.48 * ny * np.cos(ang)
        cz = nz / 2 + 0.48 * nz * np.sin(ang)
        sigma = 0.55 * max(ny, nz) * (1.0 + rng.uniform(-0.1, 0.1))
        mag = np.exp(-((yy - cy) ** 2 + (zz - cz) ** 2) / (2.0 * sigma**2))
        ramp = rng.uniform(-1.5, 1.5, size=2)
        phase = 2.0 * np.pi * (ramp[0] * yy / ny + ramp[1] * zz / nz) + rng.uniform(0, 2 * np.pi)
        maps[l] = mag * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSet(maps=maps / sos)


def build_model(
    mask: SamplingMask, ordering: EchoOrdering, coils: CoilSet, basis: SubspaceBasis
) -> AcquisitionModel:
    """Assemble the sample table; samples sorted by (echo, ky, kz)."""
    etl = ordering.etl
    n_contrasts, ny, nz = mask.masks.shape
    if basis.phi.shape[0] != etl * n_contrasts:
        raise ConfigError(
            f"basis has {basis.phi.shape[0]} echoes, mask/ordering implies {etl * n_contrasts}"
        )
    if coils.maps.shape[1:] != (ny, nz):
        raise ConfigError("coil dims do not match mask dims")
    echoes, iys, izs = [], [], []
    for c in range(n_contrasts):
        pts = np.argwhere(mask.masks[c])
        e = ordering.echo_index[c, pts[:, 0], pts[:, 1]]
        if np.any(e < 0):
            raise ConfigError("echo ordering does not cover the sampling mask")
        echoes.append(c * etl + e)
        iys.append(pts[:, 0])
        izs.append(pts[:, 1])
    echo = np.concatenate(echoes).astype(np.int32)
    iy = np.concatenate(iys).astype(np.int32)
    iz = np.concatenate(izs).astype(np.int32)
    order = np.lexsort((iz, iy, echo))
    return AcquisitionModel(
        echo=echo[order], iy=iy[order], iz=iz[order],
        coils=coils, phi=np.ascontiguousarray(basis.phi), etl=etl, dims=(ny, nz),
    )


def precompute_kernel(model: AcquisitionModel) -> np.ndarray:
    """Per-point K x K kernel: sum over sampled echoes of phi_t phi_t^T."""
    ny, nz = model.dims
    k = model.k
    kernel = np.zeros((ny * nz, k, k))
    rows = model.phi_rows
    np.add.at(kernel, model.iy.astype(np.int64) * nz + model.iz, rows[:, :, None] * rows[:, None, :])
    return kernel.reshape(ny, nz, k, k)


def forward(model: AcquisitionModel, x: np.ndarray) -> np.ndarray:
    """Coefficients (K, Ny, Nz) -> sampled k-space (S, L).

    Evaluated in the commuted order: coil-multiply and transform the K
    coefficient channels, then mix by basis rows at the sampled points.
    """
    g = fft2c(model.coils.maps[None, :, :, :] * x[:, None, :, :])  # (K, L, Ny, Nz)
    gs = g[:, :, model.iy, model.iz]  # (K, L, S)
    return np.einsum("sk,kls->sl", model.phi_rows, gs)


def adjoint(model: AcquisitionModel, y: np.ndarray) -> np.ndarray:
    """Exact adjoint of forward: (S, L) -> (K, Ny, Nz)."""
    ny, nz = model.dims
    k, l = model.k, model.coils.n_coils
    z = np.zeros((ny * nz, k, l), dtype=complex)
    vals = model.phi_rows[:, :, None] * y[:, None, :]  # (S, K, L)
    np.add.at(z, model.iy.astype(np.int64) * nz + model.iz, vals)
    z = z.reshape(ny, nz, k, l).transpose(2, 3, 0, 1)
    imgs = ifft2c(z)  # (K, L, Ny, Nz)
    return np.sum(np.conj(model.coils.maps)[None] * imgs, axis=1)


def normal_apply(model: AcquisitionModel, x: np.ndarray) -> np.ndarray:
    """A^H A x via the precomputed kernel: K*L transforms each way."""
    g = fft2c(model.coils.maps[None, :, :, :] * x[:, None, :, :])  # (K, L, Ny, Nz)
    mixed = np.einsum("yxkj,jlyx->klyx", model.kernel, g)
    imgs = ifft2c(mixed)
    return np.sum(np.conj(model.coils.maps)[None] * imgs, axis=1)


def normal_naive(model: AcquisitionModel, x: np.ndarray) -> np.ndarray:
    """A^H A x evaluated literally per echo: T*L transforms each way."""
    ny, nz = model.dims
    t = model.n_echoes
    echo_imgs = np.einsum("tk,kyx->tyx", model.phi, x)  # (T, Ny, Nz)
    mask = np.zeros((t, ny, nz), dtype=bool)
    mask[model.echo, model.iy, model.iz] = True
    ksp = fft2c(model.coils.maps[None, :, :, :] * echo_imgs[:, None, :, :])
    ksp *= mask[:, None, :, :]
    imgs = ifft2c(ksp)
    coil_comb = np.sum(np.conj(model.coils.maps)[None] * imgs, axis=1)  # (T, Ny, Nz)
    return np.einsum("tk,tyx->kyx", model.phi, coil_comb)


def acquire(
    phantom,
    schedule: BlockSchedule,
    model: AcquisitionModel,
    noise_sigma: float = 0.0,
    seed: int = 0,
    through_basis: bool = False,
    echo_chunk: int = 64,
) -> np.ndarray:
    """Simulate k-space of a digital phantom at the model's sample table.

    Per-voxel steady-state evolutions form the T echo images (exact by
    default; through_basis projects them onto the subspace first), which
    are coil-weighted, transformed, and sampled. Complex Gaussian noise
    with std noise_sigma (per complex sample, split evenly between real
    and imaginary parts) is added to every sampled point.
    """
    ny, nz = model.dims
    if phantom.t1_map.shape != (ny, nz):
        raise ConfigError(
            f"phantom dims {phantom.t1_map.shape} do not match model dims {(ny, nz)}"
        )
    t = model.n_echoes
    active = phantom.pd_map > 0
    evo = np.zeros((t, ny, nz))
    if np.any(active):
        evo[:, active] = simulate_evolution_batch(
            phantom.t1_map[active],
            phantom.t2_map[active],
            phantom.pd_map[active],
            phantom.b1_map[active],
            phantom.ie_map[active],
            schedule,
        )
    if through_basis:
        evo = np.einsum("tk,kyx->tyx", model.phi, np.einsum("tk,tyx->kyx", model.phi, evo))

    y = np.empty((model.n_samples, model.coils.n_coils), dtype=complex)
    for lo in range(0, t, echo_chunk):
        hi = min(lo + echo_chunk, t)
        sel = (model.echo >= lo) & (model.echo < hi)
        if not np.any(sel):
            continue
        ksp = fft2c(model.coils.maps[None, :, :, :] * evo[lo:hi, None, :, :])
        y[sel] = ksp[model.echo[sel] - lo, :, model.iy[sel], model.iz[sel]]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        scale = noise_sigma / np.sqrt(2.0)
        y = y + scale * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y


def coil_combine_full(model: AcquisitionModel, y: np.ndarray) -> np.ndarray:
    """Adjoint coefficient image normalized for fully sampled data."""
    return adjoint(model, y)


def estimate_spectral_norm(model: AcquisitionModel, iters: int = 30, seed: int = 0) -> float:
    """Largest eigenvalue of A^H A by power iteration on the kernel path."""
    rng = np.random.default_rng(seed)
    ny, nz = model.dims
    x = rng.standard_normal((model.k, ny, nz)) + 1j * rng.standard_normal((model.k, ny, nz))
    lam = 0.0
    for _ in range(iters):
        x = normal_apply(model, x)
        lam = np.linalg.norm(x)
        if lam == 0.0:
            return 0.0
        x = x / lam
    if not np.isfinite(lam):
        raise NumericError("power iteration diverged")
    return float(lam)
