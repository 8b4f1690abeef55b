"""Rectangular grids, node classification, fields, and discrete calculus.

Nodes are classified as interior to the domain between the regions, inside
the closure of region A or B, or on the box boundary.  Fields carry values
at every node; interpolation is multilinear; quadrature is trapezoidal.
Gradients are second-order central in the interior with one-sided stencils
where the node classification changes, so that the kink a Dirichlet field
has across a region boundary is never differenced through.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from tpkit.model import Box, Region

__all__ = [
    "NodeClass",
    "Grid",
    "GridError",
    "ScalarField",
    "VectorField",
    "build_grid",
    "gradient",
    "quadrature",
    "boundary_normal_flux",
]


class GridError(ValueError):
    pass


class NodeClass(IntEnum):
    INTERIOR = 0   # between the regions (and outside both)
    A = 1          # in the closure of region A
    B = 2          # in the closure of region B
    BOX = 3        # on the computational box boundary


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid over a box with node classification."""

    axes: tuple           # tuple of 1D coordinate arrays
    box: Box
    classes: np.ndarray   # int8 array of NodeClass values, shape = self.shape

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(ax.size for ax in self.axes)

    @property
    def h(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def h_min(self) -> float:
        return float(self.h.min())

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def node_points(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, d), C-order raveling."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def quad_weights(self) -> np.ndarray:
        """Trapezoid weights per node (outer product across axes)."""
        ws = []
        for ax in self.axes:
            h = ax[1] - ax[0]
            w = np.full(ax.size, h)
            w[0] = w[-1] = h / 2
            ws.append(w)
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return out

    def integrate(self, values: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
        w = self.quad_weights()
        if mask is not None:
            w = np.where(mask, w, 0.0)
        return float(np.sum(w * values))

    def enlarged_copy(self, factor: float) -> "Grid":
        """Same spacing on a ``factor``-enlarged box (used for tail checks)."""
        big = self.box.enlarged(factor)
        axes = []
        for k, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            n_lo = int(np.ceil((ax[0] - big.lo[k]) / h))
            n_hi = int(np.ceil((big.hi[k] - ax[-1]) / h))
            axes.append(np.concatenate([ax[0] - h * np.arange(n_lo, 0, -1), ax,
                                        ax[-1] + h * np.arange(1, n_hi + 1)]))
        newbox = Box([a[0] for a in axes], [a[-1] for a in axes])
        classes = np.zeros(tuple(a.size for a in axes), dtype=np.int8)
        return Grid(tuple(axes), newbox, classes)

    # --- point location / multilinear interpolation -----------------------

    def locate(self, points: np.ndarray, clip: bool = False):
        """Cell indices and fractional offsets for a batch of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.empty((pts.shape[0], self.dim), dtype=np.int64)
        frac = np.empty((pts.shape[0], self.dim))
        for k, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            t = (pts[:, k] - ax[0]) / h
            if clip:
                t = np.clip(t, 0.0, ax.size - 1 - 1e-12)
            else:
                bad = (t < -1e-9) | (t > ax.size - 1 + 1e-9)
                if np.any(bad):
                    j = int(np.argmax(bad))
                    raise GridError(f"point {pts[j]} outside grid along axis {k}")
                t = np.clip(t, 0.0, ax.size - 1 - 1e-12)
            i = np.floor(t).astype(np.int64)
            i = np.minimum(i, ax.size - 2)
            idx[:, k] = i
            frac[:, k] = t - i
        return idx, frac

    def interp(self, values: np.ndarray, points: np.ndarray, clip: bool = False) -> np.ndarray:
        """Multilinear interpolation of nodal ``values`` (trailing component
        axes allowed) at ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx, frac = self.locate(pts, clip=clip)
        if self.dim == 1:
            i = idx[:, 0]
            t = frac[:, 0]
            v0, v1 = values[i], values[i + 1]
            t = t.reshape((-1,) + (1,) * (values.ndim - 1))
            out = v0 * (1 - t) + v1 * t
        elif self.dim == 2:
            i, j = idx[:, 0], idx[:, 1]
            tx = frac[:, 0].reshape((-1,) + (1,) * (values.ndim - 2))
            ty = frac[:, 1].reshape((-1,) + (1,) * (values.ndim - 2))
            v00 = values[i, j]
            v10 = values[i + 1, j]
            v01 = values[i, j + 1]
            v11 = values[i + 1, j + 1]
            out = (v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty)
                   + v01 * (1 - tx) * ty + v11 * tx * ty)
        else:
            raise GridError("grids support dimensions 1 and 2 only")
        return out if np.asarray(points).ndim > 1 else out[0]

    def nearest_node_index(self, points: np.ndarray) -> tuple:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = []
        for k, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            i = np.rint((pts[:, k] - ax[0]) / h).astype(np.int64)
            out.append(np.clip(i, 0, ax.size - 1))
        return tuple(out)


def build_grid(box: Box, nodes: Sequence[int], region_a: Region, region_b: Region) -> Grid:
    """Build a classified grid over ``box``.

    Raises if fewer than 3 interior nodes separate the region closures along
    any axis line crossing both (the committor boundary layer would then be
    unresolvable).
    """
    nodes = [int(n) for n in (nodes if np.iterable(nodes) else [nodes])]
    if len(nodes) != box.dim:
        raise GridError("node count must be given per axis")
    if any(n < 9 for n in nodes):
        raise GridError("need at least 9 nodes per axis")
    axes = tuple(np.linspace(box.lo[k], box.hi[k], nodes[k]) for k in range(box.dim))

    shape = tuple(n for n in nodes)
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    classes = np.zeros(len(pts), dtype=np.int8)
    classes[region_a.inside_closure(pts)] = NodeClass.A
    in_b = region_b.inside_closure(pts)
    if np.any((classes == NodeClass.A) & in_b):
        raise GridError("closures not disjoint")
    classes[in_b] = NodeClass.B
    on_edge = np.zeros(len(pts), dtype=bool)
    for k in range(box.dim):
        on_edge |= (pts[:, k] <= box.lo[k]) | (pts[:, k] >= box.hi[k])
    classes[on_edge & (classes == NodeClass.INTERIOR)] = NodeClass.BOX
    classes = classes.reshape(shape)

    _check_channel(classes, box.dim)
    return Grid(axes, box, classes)


def _check_channel(classes: np.ndarray, dim: int) -> None:
    ok = _min_gap(classes if dim == 2 else classes[:, None])
    if ok is not None and ok < 3:
        raise GridError(f"only {ok} interior nodes between the regions along a grid line;"
                        " refine the grid or shrink the regions")


def _min_gap(classes2d: np.ndarray) -> Optional[int]:
    best = None
    for arr in list(classes2d) + list(classes2d.T):
        a_idx = np.where(arr == NodeClass.A)[0]
        b_idx = np.where(arr == NodeClass.B)[0]
        if a_idx.size == 0 or b_idx.size == 0:
            continue
        if a_idx.mean() < b_idx.mean():
            gap = arr[a_idx.max() + 1: b_idx.min()]
        else:
            gap = arr[b_idx.max() + 1: a_idx.min()]
        n_int = int(np.sum(gap == NodeClass.INTERIOR))
        best = n_int if best is None else min(best, n_int)
    return best


@dataclass
class ScalarField:
    """Scalar values at every grid node."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")

    def __call__(self, points: np.ndarray, clip: bool = False) -> np.ndarray:
        return self.grid.interp(self.values, points, clip=clip)

    def integrate(self, mask: Optional[np.ndarray] = None) -> float:
        return self.grid.integrate(self.values, mask=mask)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise GridError("field has non-finite values")


@dataclass
class VectorField:
    """R^d-valued field: values shape = grid.shape + (d,)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape + (self.grid.dim,):
            raise GridError("vector field shape mismatch")

    def __call__(self, points: np.ndarray, clip: bool = False) -> np.ndarray:
        return self.grid.interp(self.values, points, clip=clip)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)


# --- discrete calculus ----------------------------------------------------

def _class_groups(classes: np.ndarray) -> np.ndarray:
    # interior and box-boundary nodes see the same smooth solution; each
    # region is its own smoothness group.
    g = np.zeros_like(classes)
    g[classes == NodeClass.A] = 1
    g[classes == NodeClass.B] = 2
    return g


def _axis_derivative(values: np.ndarray, groups: np.ndarray, h: float, axis: int,
                     respect_classes: bool) -> np.ndarray:
    v = np.moveaxis(values, axis, 0)
    g = np.moveaxis(groups, axis, 0)
    n = v.shape[0]
    d = np.empty_like(v)

    # central everywhere, then fix ends
    d[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    d[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    d[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)

    if respect_classes and n >= 4:
        same_next = np.zeros_like(g, dtype=bool)
        same_prev = np.zeros_like(g, dtype=bool)
        same_next[:-1] = g[:-1] == g[1:]
        same_prev[1:] = g[1:] == g[:-1]

        idx = np.where(~(same_next & same_prev))
        for flat in zip(*idx):
            i = flat[0]
            rest = flat[1:]
            gi = g[(i,) + rest]
            def same(j):
                return 0 <= j < n and g[(j,) + rest] == gi
            if same(i + 1) and same(i + 2):
                d[(i,) + rest] = (-3 * v[(i,) + rest] + 4 * v[(i + 1,) + rest]
                                  - v[(i + 2,) + rest]) / (2 * h)
            elif same(i - 1) and same(i - 2):
                d[(i,) + rest] = (3 * v[(i,) + rest] - 4 * v[(i - 1,) + rest]
                                  + v[(i - 2,) + rest]) / (2 * h)
            elif same(i + 1):
                d[(i,) + rest] = (v[(i + 1,) + rest] - v[(i,) + rest]) / h
            elif same(i - 1):
                d[(i,) + rest] = (v[(i,) + rest] - v[(i - 1,) + rest]) / h
            else:
                d[(i,) + rest] = 0.0

    return np.moveaxis(d, 0, axis)


def gradient(field: ScalarField, respect_classes: bool = True) -> VectorField:
    """Nodal gradient of a scalar field.

    With ``respect_classes`` the stencil never crosses a change of node
    classification (one-sided second order there), and region nodes adjacent
    to the domain copy their neighbor's one-sided value, so interpolating the
    gradient near a region boundary reads the domain-side derivative rather
    than an average across the kink.  Disable for fields smooth across the
    regions (e.g. densities).
    """
    grid = field.grid
    groups = _class_groups(grid.classes)
    comps = []
    for k in range(grid.dim):
        dk = _axis_derivative(field.values, groups, grid.h[k], k, respect_classes)
        if respect_classes:
            dk = _extend_into_regions(dk, groups, k)
        comps.append(dk)
    return VectorField(grid, np.stack(comps, axis=-1))


def _extend_into_regions(deriv: np.ndarray, groups: np.ndarray, axis: int) -> np.ndarray:
    d = np.moveaxis(deriv.copy(), axis, 0)
    g = np.moveaxis(groups, axis, 0)
    n = d.shape[0]
    # region node with a domain neighbor along this axis: copy that
    # neighbor's (one-sided, domain-side) derivative
    for shift in (1, -1):
        src = slice(1, n) if shift == 1 else slice(0, n - 1)
        dst = slice(0, n - 1) if shift == 1 else slice(1, n)
        take = (g[dst] != 0) & (g[src] == 0)
        d[dst] = np.where(take, d[src], d[dst])
    return np.moveaxis(d, 0, axis)


def quadrature(field: ScalarField, mask: Optional[np.ndarray] = None) -> float:
    """Trapezoid quadrature of a field over the box (optionally masked)."""
    return field.integrate(mask=mask)


def boundary_normal_flux(field: ScalarField, model, region: Region,
                         delta: Optional[float] = None) -> np.ndarray:
    """Per-atom co-normal flux n . (a grad f) on a region boundary.

    The normal is the region's inward normal (exterior to the domain between
    the regions).  The normal derivative is taken with a one-sided
    second-order difference along the inward-to-domain line through each
    atom, sampling the field interpolant at distances delta and 2*delta; for
    Dirichlet fields that are constant along the boundary this equals the
    full co-normal flux since the tangential gradient vanishes.
    """
    grid = field.grid
    if delta is None:
        delta = grid.h_min
    atoms = region.atoms
    nrm = region.inward_normals()          # exterior to the domain
    into = -nrm                            # sampling direction, into the domain
    f0 = np.atleast_1d(field(atoms, clip=True))
    f1 = np.atleast_1d(field(atoms + delta * into, clip=True))
    f2 = np.atleast_1d(field(atoms + 2 * delta * into, clip=True))
    d_into = (-3 * f0 + 4 * f1 - f2) / (2 * delta)
    # n.(a grad f) = (n.a n) * df/dn with df/dn = -d_into
    n_a_n = np.einsum("ij,ij->i", nrm, nrm * model.sigma ** 2)
    return -n_a_n * d_into


def write_field_text(field: ScalarField, path, name: str = "field") -> None:
    """Text dump: header with axes and classification legend, then row-major
    values (17 significant digits)."""
    grid = field.grid
    with open(path, "w") as fh:
        fh.write(f"# {name}: scalar field, row-major over axes\n")
        for k, ax in enumerate(grid.axes):
            fh.write(f"# axis{k}: n={ax.size} lo={ax[0]:.17g} hi={ax[-1]:.17g}\n")
        fh.write("# classes: 0=interior 1=A 2=B 3=box-boundary\n")
        fh.write("# classification (row-major): " +
                 "".join(str(int(c)) for c in grid.classes.ravel()) + "\n")
        for v in field.values.ravel():
            fh.write(f"{v:.17g}\n")
