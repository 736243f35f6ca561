"""Synthetic training corpora: 2D periodic flows and vertically coupled stacks.

The 2D generator integrates incompressible vorticity dynamics with a
pseudo-spectral method on [0, 2pi)^2: spectral Poisson solve for the
streamfunction, 2/3-rule dealiased advection, exact integrating-factor
viscous decay (IFRK4 time stepping), optional fixed-in-time band-limited
forcing. The 3D generator runs one such flow per sigma level with
level-dependent forcing and couples levels with explicit vertical
diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import TensorArchive, write_archive
from .errors import ContractError, StabilityError
from .grid import to_model_channels

__all__ = [
    "FlowParams2D",
    "StackParams3D",
    "Spectral2D",
    "ns2d_step",
    "stacked3d_step",
    "random_vorticity",
    "make_forcing",
    "enstrophy",
    "make_pretrain_corpus",
    "make_finetune_corpus",
    "default_stack_params",
]

CFL_LIMIT = 0.5


@dataclass(frozen=True)
class FlowParams2D:
    """One periodic 2D flow: grid size, viscosity, step, forcing."""

    n: int = 64
    nu: float = 1e-3
    dt: float = 1e-2
    forcing_amplitude: float = 0.0
    forcing_seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 16 or (self.n & (self.n - 1)) != 0:
            raise ContractError(f"grid size must be a power of two >= 16, got {self.n}")
        if self.nu <= 0:
            raise ContractError(f"viscosity must be positive, got {self.nu}")
        if self.dt <= 0:
            raise ContractError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class StackParams3D:
    """A vertical stack of 2D flows coupled by explicit diffusion."""

    levels: tuple[FlowParams2D, ...]
    kappa: float
    sigmas: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.levels) < 2:
            raise ContractError("a stack needs at least 2 levels")
        if len(self.sigmas) != len(self.levels):
            raise ContractError("one sigma per level required")
        if self.kappa < 0:
            raise ContractError(f"coupling must be non-negative, got {self.kappa}")
        dts = {p.dt for p in self.levels}
        ns = {p.n for p in self.levels}
        if len(dts) != 1 or len(ns) != 1:
            raise ContractError("levels must share dt and grid size")
        if self.kappa * self.dt >= 0.5:
            raise ContractError(
                f"explicit vertical diffusion unstable: kappa*dt = {self.kappa * self.dt}"
            )

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def dt(self) -> float:
        return self.levels[0].dt


class Spectral2D:
    """Precomputed spectral operators for one grid size."""

    _cache: dict[int, "Spectral2D"] = {}

    def __init__(self, n: int):
        self.n = n
        k = np.fft.fftfreq(n, 1.0 / n)  # integer wavenumbers on [0, 2pi)
        self.kx = k[None, :]
        self.ky = k[:, None]
        self.k2 = self.kx**2 + self.ky**2
        k2_safe = self.k2.copy()
        k2_safe[0, 0] = 1.0
        self.inv_k2 = 1.0 / k2_safe
        self.inv_k2[0, 0] = 0.0
        kmax = n // 2
        self.dealias = (np.abs(self.kx) < (2.0 / 3.0) * kmax) & (
            np.abs(self.ky) < (2.0 / 3.0) * kmax
        )
        self.dx = 2.0 * np.pi / n

    @classmethod
    def get(cls, n: int) -> "Spectral2D":
        if n not in cls._cache:
            cls._cache[n] = cls(n)
        return cls._cache[n]

    def velocity_hat(self, omega_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        psi_hat = omega_hat * self.inv_k2
        return 1j * self.ky * psi_hat, -1j * self.kx * psi_hat

    def velocity(self, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u_hat, v_hat = self.velocity_hat(np.fft.fft2(omega))
        return np.real(np.fft.ifft2(u_hat)), np.real(np.fft.ifft2(v_hat))

    def _rhs_hat(self, omega_hat: np.ndarray, forcing_hat: np.ndarray | None) -> np.ndarray:
        u_hat, v_hat = self.velocity_hat(omega_hat)
        u = np.real(np.fft.ifft2(u_hat))
        v = np.real(np.fft.ifft2(v_hat))
        om_x = np.real(np.fft.ifft2(1j * self.kx * omega_hat))
        om_y = np.real(np.fft.ifft2(1j * self.ky * omega_hat))
        rhs = -np.fft.fft2(u * om_x + v * om_y)
        rhs *= self.dealias
        if forcing_hat is not None:
            rhs = rhs + forcing_hat
        rhs[0, 0] = 0.0  # mean mode untouched: no forcing, no advective drift
        return rhs

    def cfl(self, omega: np.ndarray, dt: float) -> float:
        u, v = self.velocity(omega)
        return float(max(np.abs(u).max(), np.abs(v).max()) * dt / self.dx)


def ns2d_step(
    omega: np.ndarray,
    params: FlowParams2D,
    forcing_hat: np.ndarray | None = None,
) -> np.ndarray:
    """Advance one IFRK4 step of 2D incompressible vorticity dynamics.

    Viscous decay is applied exactly via the integrating factor, so a pure
    single-mode field decays by exp(-nu*|k|^2*dt) per step. Raises
    StabilityError when the advective CFL number reaches 0.5.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (params.n, params.n):
        raise ContractError(f"field shape {omega.shape} != ({params.n}, {params.n})")
    if not np.isfinite(omega).all():
        raise ContractError("vorticity field contains non-finite entries")
    op = Spectral2D.get(params.n)
    cfl = op.cfl(omega, params.dt)
    if cfl >= CFL_LIMIT:
        raise StabilityError(f"CFL {cfl:.3f} >= {CFL_LIMIT} at dt={params.dt}")

    h = params.dt
    e_half = np.exp(-params.nu * op.k2 * h / 2.0)
    e_full = e_half**2
    w = np.fft.fft2(omega)
    a = h * op._rhs_hat(w, forcing_hat)
    b = h * op._rhs_hat(e_half * (w + a / 2.0), forcing_hat)
    c = h * op._rhs_hat(e_half * w + b / 2.0, forcing_hat)
    d = h * op._rhs_hat(e_full * w + e_half * c, forcing_hat)
    w_next = e_full * w + (e_full * a + 2.0 * e_half * (b + c) + d) / 6.0
    return np.real(np.fft.ifft2(w_next))


def stacked3d_step(
    column: np.ndarray,
    params: StackParams3D,
    forcing_hats: list[np.ndarray | None] | None = None,
) -> np.ndarray:
    """Per-level 2D step followed by explicit vertical diffusion.

    The diffusion substep uses one-sided stencils at top and bottom, so the
    unweighted level sum at each pixel is conserved.
    """
    column = np.asarray(column, dtype=np.float64)
    d = params.n_levels
    if column.shape[0] != d:
        raise ContractError(f"column has {column.shape[0]} levels, expected {d}")
    if forcing_hats is None:
        forcing_hats = [None] * d
    stepped = np.stack(
        [ns2d_step(column[i], params.levels[i], forcing_hats[i]) for i in range(d)]
    )
    out = stepped.copy()
    kdt = params.kappa * params.dt
    out[0] += kdt * (stepped[1] - stepped[0])
    out[-1] += kdt * (stepped[-2] - stepped[-1])
    if d > 2:
        out[1:-1] += kdt * (stepped[:-2] - 2.0 * stepped[1:-1] + stepped[2:])
    return out


def random_vorticity(
    n: int, seed: int, k_low: float = 2.0, k_high: float = 6.0, max_speed: float = 1.0
) -> np.ndarray:
    """Band-limited random initial vorticity, normalized to a peak speed."""
    op = Spectral2D.get(n)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, n))
    band = (np.sqrt(op.k2) >= k_low) & (np.sqrt(op.k2) <= k_high)
    omega = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    u, v = op.velocity(omega)
    peak = max(np.abs(u).max(), np.abs(v).max())
    if peak > 0:
        omega *= max_speed / peak
    return omega


def make_forcing(params: FlowParams2D) -> np.ndarray | None:
    """Fixed-in-time band-limited spectral forcing, or None when amplitude 0."""
    if params.forcing_amplitude == 0.0:
        return None
    op = Spectral2D.get(params.n)
    rng = np.random.default_rng(params.forcing_seed)
    noise = rng.standard_normal((params.n, params.n))
    band = (np.sqrt(op.k2) >= 1.0) & (np.sqrt(op.k2) <= 3.0)
    f = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    rms = np.sqrt(np.mean(f**2))
    if rms > 0:
        f *= params.forcing_amplitude / rms
    f_hat = np.fft.fft2(f)
    f_hat[0, 0] = 0.0
    return f_hat


def enstrophy(omega: np.ndarray) -> float:
    return float(0.5 * np.mean(np.asarray(omega) ** 2))


def _snapshot_state(omega: np.ndarray, op: Spectral2D, sigmas, time: float):
    u, v = op.velocity(omega)
    return to_model_channels(
        T=omega[None].astype(np.float32),
        u=u[None].astype(np.float32),
        v=v[None].astype(np.float32),
        sigmas=sigmas,
        time=time,
    )


def make_pretrain_corpus(
    params: FlowParams2D,
    n_trajectories: int,
    snapshots_per_traj: int,
    seed: int,
    path,
    stride: int = 5,
    burn_in: int = 20,
    vary_forcing: bool = True,
) -> TensorArchive:
    """Roll out seeded 2D trajectories and archive 4-channel snapshots.

    Channel 0 holds vorticity (the scalar proxy), channels 1-2 the derived
    velocity, channel 3 zero. With ``vary_forcing`` each trajectory gets its
    own forcing pattern, mimicking a diverse pretraining corpus.
    """
    if n_trajectories < 1 or snapshots_per_traj < 1:
        raise ContractError("need at least one trajectory and one snapshot")
    op = Spectral2D.get(params.n)
    states = []
    for traj in range(n_trajectories):
        ic_seed, forcing_seed = _derive_seeds(seed, traj)
        p = params
        if vary_forcing and params.forcing_amplitude != 0.0:
            p = FlowParams2D(
                n=params.n,
                nu=params.nu,
                dt=params.dt,
                forcing_amplitude=params.forcing_amplitude,
                forcing_seed=forcing_seed,
            )
        f_hat = make_forcing(p)
        omega = random_vorticity(params.n, ic_seed)
        for _ in range(burn_in):
            omega = ns2d_step(omega, p, f_hat)
        for snap in range(snapshots_per_traj):
            if snap > 0:
                for _ in range(stride):
                    omega = ns2d_step(omega, p, f_hat)
            sol = traj * 1000.0 + snap * params.dt * stride
            states.append(_snapshot_state(omega, op, (1.0,), sol))
    meta = {
        "kind": "pretrain2d",
        "snapshots_per_traj": snapshots_per_traj,
        "stride": stride,
        "burn_in": burn_in,
        "dt": params.dt,
        "nu": params.nu,
        "forcing_amplitude": params.forcing_amplitude,
        "seed": seed,
    }
    write_archive(states, path, meta=meta)
    return TensorArchive.open(path)


def make_finetune_corpus(
    params: StackParams3D,
    n_trajectories: int,
    snapshots_per_traj: int,
    seed: int,
    path,
    stride: int = 5,
    burn_in: int = 20,
) -> TensorArchive:
    """Roll out vertically coupled stacks and archive [level, ...] snapshots.

    Level forcing comes from each level's own FlowParams2D and is shared by
    every trajectory, so train and validation trajectories obey identical
    dynamics and differ only in their initial conditions.
    """
    if n_trajectories < 1 or snapshots_per_traj < 1:
        raise ContractError("need at least one trajectory and one snapshot")
    n = params.levels[0].n
    op = Spectral2D.get(n)
    d = params.n_levels
    forcing_hats = [make_forcing(p) for p in params.levels]
    states = []
    for traj in range(n_trajectories):
        column = np.stack(
            [
                random_vorticity(n, _derive_seeds(seed, traj * d + lev)[0])
                for lev in range(d)
            ]
        )
        for _ in range(burn_in):
            column = stacked3d_step(column, params, forcing_hats)
        for snap in range(snapshots_per_traj):
            if snap > 0:
                for _ in range(stride):
                    column = stacked3d_step(column, params, forcing_hats)
            uv = [op.velocity(column[lev]) for lev in range(d)]
            state = to_model_channels(
                T=column.astype(np.float32),
                u=np.stack([x[0] for x in uv]).astype(np.float32),
                v=np.stack([x[1] for x in uv]).astype(np.float32),
                sigmas=params.sigmas,
                time=traj * 1000.0 + snap * params.dt * stride,
            )
            states.append(state)
    meta = {
        "kind": "finetune3d",
        "snapshots_per_traj": snapshots_per_traj,
        "stride": stride,
        "burn_in": burn_in,
        "dt": params.dt,
        "kappa": params.kappa,
        "seed": seed,
    }
    write_archive(states, path, meta=meta)
    return TensorArchive.open(path)


def default_stack_params(
    n: int = 64,
    n_levels: int = 6,
    nu: float = 1e-3,
    dt: float = 1e-2,
    kappa: float = 2.0,
    base_amplitude: float = 0.08,
    sigmas: tuple[float, ...] | None = None,
    forcing_seed: int = 7,
) -> StackParams3D:
    """Desk-scale stack: distinct per-level forcing so level statistics differ."""
    if sigmas is None:
        sigmas = _default_sigmas(n_levels)
    levels = tuple(
        FlowParams2D(
            n=n,
            nu=nu,
            dt=dt,
            forcing_amplitude=base_amplitude * (1.0 + 0.5 * lev),
            forcing_seed=forcing_seed + lev,
        )
        for lev in range(n_levels)
    )
    return StackParams3D(levels=levels, kappa=kappa, sigmas=tuple(sigmas))


def _default_sigmas(n_levels: int) -> tuple[float, ...]:
    # geometric ladder from near-surface to aloft, strictly decreasing
    return tuple(float(s) for s in np.geomspace(0.9995, 0.002, n_levels))


def _derive_seeds(master: int, index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([master, index])
    a, b = ss.generate_state(2)
    return int(a), int(b)
