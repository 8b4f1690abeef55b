"""Diffusion models, metastable regions, and invariant densities.

The dynamics is the Ito SDE

    dX_t = b(X_t) dt + sqrt(2) sigma(X_t) dW_t,

with generator L u = tr(a grad^2 u) + b . grad u and a = sigma sigma^T.
Built-in families keep sigma a constant isotropic matrix, which is what the
fast simulation paths and the grid solvers assume; drift and potential are
vectorized over a leading batch axis.

Computation replaces R^d by a bounding box chosen so that the invariant
mass outside it is negligible (checked, see :func:`invariant_density`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Box",
    "DiffusionModel",
    "Region",
    "ModelError",
    "ball_region",
    "build_model",
    "invariant_density",
    "validate_model",
    "validate_region_pair",
]


class ModelError(ValueError):
    """Raised for invalid model configuration or violated model invariants."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned bounding box standing in for R^d."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ModelError(f"invalid box: lo={lo}, hi={hi}")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, x: np.ndarray, margin: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - margin) & (x <= self.hi + margin), axis=-1)

    def enlarged(self, factor: float) -> "Box":
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * factor
        return Box(mid - half, mid + half)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class Region:
    """Bounded open ball (an interval in 1D) with a discretized boundary.

    ``atoms`` are points on the boundary with surface weights ``weights``
    summing to the total surface measure: the two endpoints with weight 1
    each in 1D, an equispaced circle discretization with arc-length weights
    in 2D.  ``inward_normals`` point into the region, i.e. exterior to the
    domain between the regions; this is the normal convention used by every
    boundary-flux formula in the package.
    """

    center: np.ndarray
    radius: float
    atoms: np.ndarray          # (m, d)
    weights: np.ndarray        # (m,)
    angles: Optional[np.ndarray] = None  # (m,) polar angle of each atom, 2D only
    name: str = "region"

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        object.__setattr__(self, "atoms", np.atleast_2d(np.asarray(self.atoms, dtype=float)))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.radius <= 0:
            raise ModelError(f"{self.name}: radius must be positive")
        if self.atoms.shape[0] != self.weights.size:
            raise ModelError(f"{self.name}: atoms/weights length mismatch")

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def surface_measure(self) -> float:
        # |∂region|: 2 points in 1D (counting measure), circumference in 2D
        return 2.0 if self.dim == 1 else 2.0 * np.pi * self.radius

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Negative inside the region, zero on the boundary."""
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def inside(self, x: np.ndarray) -> np.ndarray:
        return self.signed_distance(x) < 0

    def inside_closure(self, x: np.ndarray) -> np.ndarray:
        return self.signed_distance(x) <= 0

    def inward_normals(self) -> np.ndarray:
        """Unit normals at the atoms pointing into the region."""
        r = self.atoms - self.center
        return -r / np.linalg.norm(r, axis=-1, keepdims=True)

    def inward_normal_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = x - self.center
        return -r / np.linalg.norm(r, axis=-1, keepdims=True)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Nearest point on the boundary sphere/endpoints."""
        x = np.asarray(x, dtype=float)
        r = x - self.center
        nrm = np.linalg.norm(r, axis=-1, keepdims=True)
        nrm = np.where(nrm == 0, 1.0, nrm)
        return self.center + self.radius * r / nrm

    def nearest_atom_index(self, x: np.ndarray) -> np.ndarray:
        """Index of the boundary atom closest to each point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dim == 1:
            return (x[:, 0] > self.center[0]).astype(int)  # atoms ordered [left, right]
        ang = np.arctan2(x[:, 1] - self.center[1], x[:, 0] - self.center[0])
        m = self.atoms.shape[0]
        return np.rint(ang / (2 * np.pi / m)).astype(int) % m

    def angle_coordinate(self, x: np.ndarray, ref_direction: np.ndarray) -> np.ndarray:
        """Signed angle of boundary points measured from ``ref_direction``.

        Centering the coordinate on the direction that carries the mass keeps
        the branch cut at the (nearly empty) far side, so angle samples can
        feed order statistics without wrap-around artifacts.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dim == 1:
            return x[:, 0] - self.center[0]
        ref = np.asarray(ref_direction, dtype=float)
        ref = ref / np.linalg.norm(ref)
        r = x - self.center
        cosv = r @ ref
        sinv = r[:, 0] * (-ref[1]) + r[:, 1] * ref[0]
        return np.arctan2(sinv, cosv)


def ball_region(center, radius: float, n_atoms: int = 64, name: str = "region") -> Region:
    """Build a ball (1D: interval) region with its boundary discretization."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if center.size == 1:
        atoms = np.array([[center[0] - radius], [center[0] + radius]])
        weights = np.array([1.0, 1.0])
        return Region(center, radius, atoms, weights, None, name)
    if center.size != 2:
        raise ModelError("regions support 1D and 2D only")
    if n_atoms < 8:
        raise ModelError(f"{name}: need at least 8 boundary atoms in 2D")
    ang = 2 * np.pi * np.arange(n_atoms) / n_atoms
    atoms = center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    weights = np.full(n_atoms, 2 * np.pi * radius / n_atoms)
    return Region(center, radius, atoms, weights, ang, name)


# --- built-in drift / potential families (module level so models pickle) ---

def _zero_drift(x):
    return np.zeros_like(x)


def _zero_potential(x):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1])


def _dw1d_potential(x):
    x = np.asarray(x, dtype=float)
    return (x[..., 0] ** 2 - 1.0) ** 2


def _dw1d_drift(x):
    x = np.asarray(x, dtype=float)
    return -4.0 * x * (x * x - 1.0)


def _dw2d_potential(x):
    x = np.asarray(x, dtype=float)
    return (x[..., 0] ** 2 - 1.0) ** 2 + 2.0 * x[..., 1] ** 2


def _dw2d_grad_v(x):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    g[..., 0] = 4.0 * x[..., 0] * (x[..., 0] ** 2 - 1.0)
    g[..., 1] = 4.0 * x[..., 1]
    return g


def _dw2d_drift(x):
    return -_dw2d_grad_v(x)


def _shear2d_drift(x, c):
    # -grad V plus a divergence-free rotation of grad V: leaves exp(-beta V)
    # invariant but breaks reversibility.
    g = _dw2d_grad_v(x)
    rot = np.empty_like(g)
    rot[..., 0] = -g[..., 1]
    rot[..., 1] = g[..., 0]
    return -g + c * rot


@dataclass(frozen=True)
class DiffusionModel:
    """Drift, diffusion, and derived quantities for one SDE.

    ``sigma`` is the constant isotropic diffusion factor (sigma(x) = sigma*I),
    so a(x) = sigma^2 * I and the ellipticity bounds are lam = Lam = sigma^2.
    ``potential``/``beta`` are set when the invariant density is exactly
    exp(-beta V)/Z; ``reversible`` additionally asserts b = -grad V.
    ``confined`` marks models understood on the box itself (reflecting-box
    convention), for which no mass-outside-the-box check applies.
    """

    name: str
    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: float
    box: Box
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    beta: Optional[float] = None
    reversible: bool = False
    confined: bool = False
    params: dict = field(default_factory=dict)

    @property
    def lam(self) -> float:
        return self.sigma ** 2

    @property
    def Lam(self) -> float:
        return self.sigma ** 2

    @property
    def noise_scale(self) -> float:
        """Coefficient of dW in the SDE: sqrt(2)*sigma."""
        return np.sqrt(2.0) * self.sigma

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.sigma * np.eye(self.dim)

    def a_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.sigma ** 2 * np.eye(self.dim)

    def a_diag(self, x: np.ndarray) -> np.ndarray:
        """Diagonal of a(x), vectorized: shape x.shape."""
        x = np.asarray(x, dtype=float)
        return np.full_like(x, self.sigma ** 2)

    def descriptor(self) -> str:
        items = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return (f"{self.name}(d={self.dim},sigma={self.sigma!r},beta={self.beta!r},"
                f"box=[{self.box.lo.tolist()},{self.box.hi.tolist()}],{items})")

    def content_hash(self) -> str:
        return hashlib.sha256(self.descriptor().encode()).hexdigest()[:16]


FAMILIES = ("brownian1d", "doublewell1d", "doublewell2d", "shear2d")


def build_model(config: dict) -> DiffusionModel:
    """Construct a built-in model family from a descriptor mapping.

    Parameters
    ----------
    config : dict
        Must contain ``family`` (one of ``FAMILIES``); optional keys:
        ``beta`` (inverse temperature, default per family), ``shear_c``
        (rotational drift strength, shear2d only), ``box`` (pair or pair per
        axis overriding the family default).

    Returns
    -------
    DiffusionModel
        Validated on 100 random probe points in the bounding box.
    """
    cfg = dict(config)
    family = cfg.pop("family", None)
    if family not in FAMILIES:
        raise ModelError(f"unknown model family {family!r}; choose from {FAMILIES}")

    beta = cfg.pop("beta", None)
    box_override = cfg.pop("box", None)
    shear_c = cfg.pop("shear_c", None)
    if cfg:
        raise ModelError(f"unknown model parameters: {sorted(cfg)}")
    if family != "shear2d" and shear_c is not None:
        raise ModelError("shear_c only applies to family shear2d")

    if family == "brownian1d":
        if beta is not None:
            raise ModelError("brownian1d has no temperature parameter")
        box = Box(*(box_override or ([-3.0], [4.0])))
        model = DiffusionModel(
            name=family, dim=1, drift=_zero_drift, sigma=1.0 / np.sqrt(2.0), box=box,
            potential=_zero_potential, beta=1.0, reversible=True, confined=True,
            params={"family": family},
        )
    elif family == "doublewell1d":
        beta = 3.0 if beta is None else float(beta)
        if beta <= 0:
            raise ModelError("beta must be positive")
        box = Box(*(box_override or ([-2.5], [2.5])))
        model = DiffusionModel(
            name=family, dim=1, drift=_dw1d_drift, sigma=np.sqrt(1.0 / beta), box=box,
            potential=_dw1d_potential, beta=beta, reversible=True,
            params={"family": family, "beta": beta},
        )
    elif family == "doublewell2d":
        beta = 2.0 if beta is None else float(beta)
        if beta <= 0:
            raise ModelError("beta must be positive")
        box = Box(*(box_override or ([-2.4, -1.8], [2.4, 1.8])))
        model = DiffusionModel(
            name=family, dim=2, drift=_dw2d_drift, sigma=np.sqrt(1.0 / beta), box=box,
            potential=_dw2d_potential, beta=beta, reversible=True,
            params={"family": family, "beta": beta},
        )
    else:  # shear2d
        beta = 2.0 if beta is None else float(beta)
        if beta <= 0:
            raise ModelError("beta must be positive")
        c = 0.5 if shear_c is None else float(shear_c)
        box = Box(*(box_override or ([-2.4, -1.8], [2.4, 1.8])))
        model = DiffusionModel(
            name=family, dim=2, drift=partial(_shear2d_drift, c=c),
            sigma=np.sqrt(1.0 / beta), box=box,
            potential=_dw2d_potential, beta=beta, reversible=False,
            params={"family": family, "beta": beta, "shear_c": c},
        )

    validate_model(model)
    return model


def validate_model(model: DiffusionModel, n_probe: int = 100, seed: int = 0xC0FFEE) -> None:
    """Spot-check model invariants at random probe points.

    Checks that a = sigma sigma^T is symmetric positive definite with
    eigenvalues inside the declared [lam, Lam], and for reversible models
    that the drift matches -grad V to finite-difference tolerance.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = model.box.sample(rng, n_probe)
    for x in pts[: min(10, n_probe)]:
        a = model.a_matrix(x)
        if not np.allclose(a, a.T):
            raise ModelError("a(x) is not symmetric")
        eig = np.linalg.eigvalsh(a)
        if eig.min() < model.lam - 1e-12 or eig.max() > model.Lam + 1e-12:
            raise ModelError(f"a(x) eigenvalues {eig} outside [{model.lam}, {model.Lam}]")
        if eig.min() <= 0:
            raise ModelError("a(x) is not positive definite at a probe point")
    if model.reversible:
        if model.potential is None or model.beta is None:
            raise ModelError("reversible model must declare potential and beta")
        h = 1e-6 * max(1.0, model.box.diameter)
        b = model.drift(pts)
        for k in range(model.dim):
            e = np.zeros(model.dim)
            e[k] = h
            dv = (model.potential(pts + e) - model.potential(pts - e)) / (2 * h)
            if not np.allclose(b[:, k], -dv, atol=1e-4, rtol=1e-4):
                raise ModelError("drift does not match -grad V at probe points")


def validate_region_pair(a: Region, b: Region, box: Box) -> None:
    """Check that the two region closures are disjoint and inside the box."""
    if a.dim != b.dim or a.dim != box.dim:
        raise ModelError("regions and box dimension mismatch")
    gap = np.linalg.norm(a.center - b.center) - a.radius - b.radius
    if gap <= 0:
        raise ModelError("closures not disjoint")
    for reg in (a, b):
        if not (np.all(reg.center - reg.radius > box.lo) and np.all(reg.center + reg.radius < box.hi)):
            raise ModelError(f"{reg.name} does not fit strictly inside the box")
        total = reg.weights.sum()
        if abs(total - reg.surface_measure) > 1e-9 * max(1.0, reg.surface_measure):
            raise ModelError(f"{reg.name}: boundary weights sum {total} != surface measure")


def invariant_density(model: DiffusionModel, grid, histogram: Optional[np.ndarray] = None,
                      tail_rtol: float = 1e-6):
    """Invariant probability density on the grid.

    Analytic branch (models carrying a potential): rho = exp(-beta V)/Z with
    Z from the grid's trapezoid quadrature, so the quadrature of the returned
    field over the box is 1 to machine precision.  A tail check compares Z on
    the box against Z on the 1.5x-enlarged box at the same spacing and
    requires relative agreement below ``tail_rtol`` (skipped for confined
    models, whose state space *is* the box).

    Empirical branch: pass a nonnegative ``histogram`` of node values; it is
    normalized by the same quadrature.
    """
    from tpkit.grid import ScalarField  # local import to avoid a cycle

    if histogram is not None:
        vals = np.asarray(histogram, dtype=float)
        if vals.shape != grid.shape:
            raise ModelError("histogram shape does not match grid")
        z = grid.integrate(vals)
        if z <= 0:
            raise ModelError("histogram has no mass")
        return ScalarField(grid, vals / z)

    if model.potential is None or model.beta is None:
        raise ModelError("model has no potential; supply a histogram for the empirical branch")

    vals = np.exp(-model.beta * model.potential(grid.node_points()).reshape(grid.shape))
    z = grid.integrate(vals)

    if not model.confined:
        big = grid.enlarged_copy(1.5)
        vals_big = np.exp(-model.beta * model.potential(big.node_points()).reshape(big.shape))
        z_big = big.integrate(vals_big)
        if abs(z_big - z) > tail_rtol * z_big:
            raise ModelError(
                f"invariant mass outside the box: Z(box)={z:.12g} vs Z(1.5x box)={z_big:.12g};"
                " enlarge the box")

    rho = vals / z
    if rho.min() <= 0:
        raise ModelError("invariant density is not strictly positive on the grid")
    return ScalarField(grid, rho)
