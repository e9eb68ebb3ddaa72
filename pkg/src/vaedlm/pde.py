"""Pseudo-spectral data generation for the 1-D benchmark PDEs.

All families are solved on a periodic grid: the ``n_x`` mesh includes both
endpoints, the solver evolves the first ``n_x - 1`` points and the last column
is the periodic copy of the first.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import solve_ivp

FAMILIES = ("burgers", "allen_cahn", "porous_medium", "ks", "kdv")
FAMILY_IDS = {name: i for i, name in enumerate(FAMILIES)}

DEFAULTS = {
    "burgers": ({"nu": 0.01}, (0.0, 1.0)),
    "allen_cahn": ({"eps": 1e-4, "reaction": 5.0}, (-1.0, 1.0)),
    "porous_medium": ({"D": 0.5, "gamma": 4.9e-4}, (-0.8, 0.8)),
    "ks": ({"nu1": 5.0, "nu2": 0.5, "nu3": 0.005}, (-6.0, 6.0)),
    "kdv": ({"delta": 0.022}, (0.0, 2.0)),
}

# families obeying a maximum principle (plus Allen-Cahn, bounded by its wells)
BOUNDED_FAMILIES = ("burgers", "allen_cahn", "porous_medium")

MAGIC = b"VDLM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII4dQ")

RTOL = ATOL = 1e-8


class SolverBlowUp(RuntimeError):
    pass


class PdeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    family: str
    coefficients: dict = Field(default_factory=dict)
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    t_min: float = 0.0
    t_max: float = 1.0
    n_x: int = Field(201, ge=3)
    n_t: int = Field(201, ge=2)

    def model_post_init(self, __context) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown PDE family {self.family!r}; expected one of {FAMILIES}")
        coeffs, (lo, hi) = DEFAULTS[self.family]
        unknown = set(self.coefficients) - set(coeffs)
        if unknown:
            raise ValueError(f"unknown coefficients for {self.family}: {sorted(unknown)}")
        object.__setattr__(self, "coefficients", {**coeffs, **self.coefficients})
        if self.x_min is None:
            object.__setattr__(self, "x_min", lo)
        if self.x_max is None:
            object.__setattr__(self, "x_max", hi)
        if not self.x_max > self.x_min or not self.t_max > self.t_min:
            raise ValueError("empty spatial or temporal interval")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_t)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min


# -- seeding ------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def child_seed(master_seed: int, index: int) -> int:
    return splitmix64((splitmix64(master_seed & _MASK64) + index) & _MASK64)


# -- initial conditions --------------------------------------------------


def sample_ic_coefficients(spec: PdeSpec, rng: np.random.Generator) -> dict:
    f = spec.family
    if f == "burgers":
        return {"alpha": rng.uniform(-1.0, 1.0, 3)}
    if f in ("allen_cahn", "kdv"):
        return {"alpha": rng.uniform(-1.0, 1.0, 2)}
    if f == "porous_medium":
        return {"alpha": rng.uniform(-1.0, 1.0, 2), "beta": rng.uniform(np.pi / 2, 2 * np.pi, 2)}
    return {"alpha": rng.uniform(-1.0, 1.0, 1)}


def initial_condition(spec: PdeSpec, coeffs: dict, x: Optional[np.ndarray] = None) -> np.ndarray:
    x = spec.x if x is None else x
    a = np.asarray(coeffs["alpha"])
    f = spec.family
    if f == "burgers":
        c = np.cos(2 * np.pi * x)
        return a[0] * c + a[1] * c ** 3 + a[2] * c ** 5
    if f == "allen_cahn":
        c = np.cos(np.pi * x)
        return a[0] * x ** 2 * c + a[1] * x ** 2 * c ** 3
    if f == "kdv":
        c = np.cos(np.pi * x)
        return a[0] * c + a[1] * c ** 3
    if f == "porous_medium":
        b = np.asarray(coeffs["beta"])
        return a[0] * np.abs(x) * np.cos(b[0] * x) + a[1] * np.abs(x) * np.sin(b[1] * x)
    return np.cos(x) * (1.0 + a[0] * np.sin(x))


def sample_initial_condition(spec: PdeSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return initial_condition(spec, sample_ic_coefficients(spec, rng))


# -- spectral operators --------------------------------------------------


@dataclass
class SpectralGrid:
    n: int
    length: float
    k: np.ndarray = field(init=False)
    dealias: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.arange(self.n // 2 + 1)
        self.k = 2 * np.pi * m / self.length
        if self.n % 2 == 0:
            self.k[-1] = 0.0  # Nyquist mode carries no derivative information
        self.dealias = (m < self.n / 3.0).astype(float)

    def deriv(self, u: np.ndarray, order: int) -> np.ndarray:
        return np.fft.irfft((1j * self.k) ** order * np.fft.rfft(u), n=self.n)

    def filtered(self, u: np.ndarray) -> np.ndarray:
        """Spectral coefficients of a nonlinear term with 2/3-rule truncation."""
        return self.dealias * np.fft.rfft(u)


def _grid(spec: PdeSpec) -> SpectralGrid:
    return SpectralGrid(spec.n_x - 1, spec.length)


def spectral_rhs(spec: PdeSpec, state: np.ndarray, grid: Optional[SpectralGrid] = None) -> np.ndarray:
    """Time derivative of the periodic state (length ``n_x - 1``)."""
    grid = grid or _grid(spec)
    c = spec.coefficients
    k = grid.k
    ik = 1j * k
    uh = np.fft.rfft(state)
    f = spec.family
    if f == "burgers":
        rhs = -c["nu"] * k ** 2 * uh - 0.5 * ik * grid.filtered(state ** 2)
    elif f == "allen_cahn":
        rhs = -c["eps"] * k ** 2 * uh + c["reaction"] * grid.filtered(state - state ** 3)
    elif f == "porous_medium":
        ux = np.fft.irfft(ik * uh, n=grid.n)
        rhs = c["D"] * ik * grid.filtered(state ** 2 * ux) - c["gamma"] * k ** 2 * uh
    elif f == "ks":
        rhs = (-0.5 * c["nu1"] * ik * grid.filtered(state ** 2)
               + c["nu2"] * k ** 2 * uh - c["nu3"] * k ** 4 * uh)
    else:
        rhs = -0.5 * ik * grid.filtered(state ** 2) + c["delta"] ** 2 * 1j * k ** 3 * uh
    return np.fft.irfft(rhs, n=grid.n)


@dataclass
class SolutionField:
    values: np.ndarray  # (n_t, n_x)
    x: np.ndarray
    t: np.ndarray
    ic_seed: Optional[int] = None


def integrate(spec: PdeSpec, ic: np.ndarray, seed: Optional[int] = None) -> SolutionField:
    """Adaptive RK45 solve sampled on the uniform time grid."""
    ic = np.asarray(ic, dtype=np.float64)
    if ic.shape != (spec.n_x,):
        raise ValueError(f"initial condition must have length {spec.n_x}")
    grid = _grid(spec)
    sol = solve_ivp(lambda _, y: spectral_rhs(spec, y, grid), (spec.t_min, spec.t_max),
                    ic[:-1], method="RK45", t_eval=spec.t, rtol=RTOL, atol=ATOL)
    if sol.status != 0 or sol.y.shape[1] != spec.n_t or not np.all(np.isfinite(sol.y)):
        raise SolverBlowUp(f"{spec.family} solve failed (seed={seed}): {sol.message}")
    periodic = sol.y.T
    values = np.concatenate([periodic, periodic[:, :1]], axis=1)
    values[0] = ic
    return SolutionField(values=values, x=spec.x, t=spec.t, ic_seed=seed)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    spec: PdeSpec
    values: np.ndarray  # float32, (n_samples, n_t, n_x)
    master_seed: int

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> SolutionField:
        return SolutionField(self.values[i].astype(np.float64), self.spec.x, self.spec.t,
                             child_seed(self.master_seed, i))

    def seed(self, i: int) -> int:
        return child_seed(self.master_seed, i)


def _solve_one(spec: PdeSpec, master_seed: int, i: int) -> np.ndarray:
    seed = child_seed(master_seed, i)
    ic = sample_initial_condition(spec, seed)
    try:
        sol = integrate(spec, ic, seed)
    except SolverBlowUp as exc:
        raise SolverBlowUp(f"sample {i}: {exc}") from exc
    if spec.family in BOUNDED_FAMILIES:
        bound = 10 * np.max(np.abs(ic))
        if spec.family == "allen_cahn":
            bound = 10 * max(np.max(np.abs(ic)), 1.0)
        if np.max(np.abs(sol.values)) > bound:
            raise SolverBlowUp(f"sample {i} (seed={seed}) exceeds sanity bound {bound:.3g}")
    return sol.values.astype(np.float32)


def generate_dataset(spec: PdeSpec, n_samples: int, master_seed: int, threads: int = 1) -> Dataset:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda i: _solve_one(spec, master_seed, i), range(n_samples)))
    return Dataset(spec=spec, values=np.stack(rows), master_seed=master_seed)


def dataset_bytes(ds: Dataset) -> bytes:
    s = ds.spec
    n, nt, nx = ds.values.shape
    head = _HEADER.pack(MAGIC, VERSION, FAMILY_IDS[s.family], n, nt, nx,
                        s.x_min, s.x_max, s.t_min, s.t_max, ds.master_seed & _MASK64)
    return head + np.ascontiguousarray(ds.values, dtype="<f4").tobytes()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def load_dataset(path, spec: Optional[PdeSpec] = None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, fam, n, nt, nx, x0, x1, t0, t1, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if fam >= len(FAMILIES):
        raise ValueError(f"{path}: unknown family id {fam}")
    expected = _HEADER.size + 4 * n * nt * nx
    if len(data) != expected:
        raise ValueError(f"{path}: truncated dataset ({len(data)} of {expected} bytes)")
    if spec is None:
        side = sidecar_path(path)
        if side.exists():
            spec = PdeSpec(**json.loads(side.read_text())["spec"])
        else:
            spec = PdeSpec(family=FAMILIES[fam], x_min=x0, x_max=x1, t_min=t0, t_max=t1,
                           n_x=nx, n_t=nt)
    header = (FAMILIES[fam], x0, x1, t0, t1, nx, nt)
    if header != (spec.family, spec.x_min, spec.x_max, spec.t_min, spec.t_max, spec.n_x, spec.n_t):
        raise ValueError(f"{path}: header does not match the dataset spec")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, nt, nx).copy()
    return Dataset(spec=spec, values=values, master_seed=seed)
