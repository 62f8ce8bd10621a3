"""Continuous Q_k Lagrange spaces with hanging-node constraints."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import MAXLEV, Mesh, MeshError
from .reference import lagrange_1d, reference_nodes, tabulate

MAX_DEGREE = 4
# local node sequences along each edge: west, east, south, north
_EDGE_AB = {
    0: lambda k: [(0, t) for t in range(k + 1)],
    1: lambda k: [(k, t) for t in range(k + 1)],
    2: lambda k: [(t, 0) for t in range(k + 1)],
    3: lambda k: [(t, k) for t in range(k + 1)],
}


@lru_cache(maxsize=None)
def _half_edge_weights(k: int) -> np.ndarray:
    """Coarse-edge Lagrange weights at the fine-edge nodes ``j / (2k)``."""
    return lagrange_1d(k, np.arange(2 * k + 1) / (2 * k))[0]


class SpaceError(ValueError):
    pass


class FeSpace:
    """Q_k space on the active cells of ``mesh``.

    Global DoFs live at every equispaced node of every active cell; the ones
    at hanging positions are constrained to the nodes of the coarse edge
    they lie on.  ``dirichlet_markers`` names boundary segments whose nodes
    are fixed to zero; ``"all"`` selects every boundary edge.
    """

    def __init__(self, mesh: Mesh, degree: int, dirichlet_markers=("all",)):
        if not 1 <= degree <= MAX_DEGREE:
            raise SpaceError(f"degree must be in 1..{MAX_DEGREE}, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.dirichlet_markers = frozenset(dirichlet_markers)
        self._number_dofs()
        self._build_constraints()
        self._build_dirichlet()

    # ------------------------------------------------------------------
    def _number_dofs(self) -> None:
        k = self.degree
        mesh = self.mesh
        nloc = (k + 1) ** 2
        keys: dict[tuple[int, int], int] = {}
        cell_dofs = np.empty((mesh.n_active, nloc), dtype=np.int64)
        ab = [(a, b) for b in range(k + 1) for a in range(k + 1)]
        for c in range(mesh.n_active):
            ox, oy = mesh.cell_origin_lattice[c]
            s = int(mesh.cell_step_lattice[c])
            bx, by = int(ox) * k, int(oy) * k
            row = cell_dofs[c]
            for loc, (a, b) in enumerate(ab):
                key = (bx + a * s, by + b * s)
                row[loc] = keys.setdefault(key, len(keys))
        self.cell_dofs = cell_dofs
        self._keys = keys
        lattice = np.array(list(keys.keys()), dtype=np.float64).reshape(-1, 2) / k
        self.node_coords = mesh.lattice_to_xy(lattice)

    def _edge_keys(self, c_level: int, ci: int, cj: int, direction: int) -> list[tuple[int, int]]:
        k = self.degree
        s = 1 << (MAXLEV - c_level)
        bx, by = ci * s * k, cj * s * k
        return [(bx + a * s, by + b * s) for a, b in _EDGE_AB[direction](k)]

    def _build_constraints(self) -> None:
        k = self.degree
        mesh = self.mesh
        raw: dict[int, list[tuple[int, float]]] = {}
        opposite = {0: 1, 1: 0, 2: 3, 3: 2}
        for c, nbrs in enumerate(mesh.edge_neighbors):
            cell = mesh.cells[mesh.active[c]]
            for d, (kind, nid) in enumerate(nbrs):
                if kind != "coarser":
                    continue
                coarse = mesh.cells[nid]
                ckeys = self._edge_keys(coarse.level, coarse.i, coarse.j, opposite[d])
                cdofs = [self._keys[key] for key in ckeys]
                ckeyset = set(ckeys)
                e0 = np.array(ckeys[0], dtype=float)
                e1 = np.array(ckeys[-1], dtype=float)
                length = np.linalg.norm(e1 - e0)
                for key in self._edge_keys(cell.level, cell.i, cell.j, d):
                    if key in ckeyset:
                        continue
                    dof = self._keys[key]
                    if dof in raw:
                        continue
                    tau = np.linalg.norm(np.array(key, dtype=float) - e0) / length
                    w = _half_edge_weights(k)[int(round(2 * k * tau))]
                    raw[dof] = [(m, float(wt)) for m, wt in zip(cdofs, w) if abs(wt) > 1e-14]
        # resolve chains so that every master is unconstrained
        resolved: dict[int, dict[int, float]] = {}

        def expand(dof: int, depth: int = 0) -> dict[int, float]:
            if dof in resolved:
                return resolved[dof]
            if depth > 64:
                raise SpaceError("cyclic hanging-node constraints")
            out: dict[int, float] = {}
            for m, w in raw[dof]:
                if m in raw:
                    for mm, ww in expand(m, depth + 1).items():
                        out[mm] = out.get(mm, 0.0) + w * ww
                else:
                    out[m] = out.get(m, 0.0) + w
            resolved[dof] = out
            return out

        for dof in raw:
            expand(dof)
        self.constraints = {dof: sorted(ms.items()) for dof, ms in sorted(resolved.items())}

    def _build_dirichlet(self) -> None:
        mesh = self.mesh
        fixed: set[int] = set()
        self.boundary_dofs: dict[str, set[int]] = {}
        for c, d, name in mesh.boundary_edges():
            cell = mesh.cells[mesh.active[c]]
            dofs = {self._keys[key] for key in self._edge_keys(cell.level, cell.i, cell.j, d)}
            self.boundary_dofs.setdefault(name, set()).update(dofs)
            if "all" in self.dirichlet_markers or name in self.dirichlet_markers:
                fixed |= dofs
        self.dirichlet_dofs = np.array(sorted(fixed), dtype=np.int64)

    # ------------------------------------------------------------------
    @property
    def n_dofs(self) -> int:
        return len(self.node_coords)

    @property
    def n_local(self) -> int:
        return (self.degree + 1) ** 2

    @cached_property
    def constrained_dofs(self) -> np.ndarray:
        return np.array(sorted(self.constraints), dtype=np.int64)

    @cached_property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained_dofs] = False
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    @cached_property
    def conform(self) -> sp.csr_matrix:
        """Square operator mapping raw nodal values to constraint-consistent ones."""
        n = self.n_dofs
        rows, cols, vals = [], [], []
        is_con = np.zeros(n, dtype=bool)
        is_con[self.constrained_dofs] = True
        free_rows = np.flatnonzero(~is_con)
        rows.extend(free_rows)
        cols.extend(free_rows)
        vals.extend(np.ones(len(free_rows)))
        for dof, masters in self.constraints.items():
            for m, w in masters:
                rows.append(dof)
                cols.append(m)
                vals.append(w)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    @cached_property
    def prolong(self) -> sp.csr_matrix:
        """Map from free unknowns to all nodal coefficients (Dirichlet values zero)."""
        return self.conform[:, self.free_dofs].tocsr()

    def distribute(self, coef: np.ndarray) -> np.ndarray:
        """Overwrite constrained coefficients by their constraint combination."""
        return self.conform @ np.asarray(coef, dtype=float)

    def condense(self, raw: np.ndarray) -> np.ndarray:
        """Transfer a vector assembled against local basis functions to the conforming basis."""
        return self.conform.T @ np.asarray(raw, dtype=float)

    # ------------------------------------------------------------------
    def tabulate(self, points) -> tuple[np.ndarray, np.ndarray]:
        return tabulate(self.degree, points)

    def locate(self, point) -> tuple[int, np.ndarray]:
        c = self.mesh.locate(point)
        return c, self.mesh.reference_coords(c, point)

    def basis_at(self, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global dofs, values and physical gradients of the local basis at ``point``."""
        c, ref = self.locate(point)
        v, g = self.tabulate(ref[None, :])
        grads = g[0] / self.mesh.cell_size[c]
        return self.cell_dofs[c], v[0], grads

    def conforming_basis_at(self, point) -> np.ndarray:
        """Values of every conforming basis function at ``point`` (length ``n_dofs``)."""
        dofs, v, _ = self.basis_at(point)
        raw = np.zeros(self.n_dofs)
        np.add.at(raw, dofs, v)
        return self.condense(raw)


@dataclass(eq=False)
class FeFunction:
    """Coefficient vector over all nodes of ``space`` (constrained ones included)."""

    space: FeSpace
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if self.coef.shape != (self.space.n_dofs,):
            raise SpaceError("coefficient vector does not match the space")

    @classmethod
    def zeros(cls, space: FeSpace) -> FeFunction:
        return cls(space, np.zeros(space.n_dofs))

    @classmethod
    def from_free(cls, space: FeSpace, free: np.ndarray) -> FeFunction:
        return cls(space, space.prolong @ free)

    def copy(self) -> FeFunction:
        return FeFunction(self.space, self.coef.copy())

    def __add__(self, other: FeFunction) -> FeFunction:
        _check_same(self, other)
        return FeFunction(self.space, self.coef + other.coef)

    def __sub__(self, other: FeFunction) -> FeFunction:
        _check_same(self, other)
        return FeFunction(self.space, self.coef - other.coef)

    def __mul__(self, scalar: float) -> FeFunction:
        return FeFunction(self.space, self.coef * float(scalar))

    __rmul__ = __mul__

    def distribute(self) -> FeFunction:
        return FeFunction(self.space, self.space.distribute(self.coef))

    @property
    def local(self) -> np.ndarray:
        return self.coef[self.space.cell_dofs]

    def cell_values(self, ref_values: np.ndarray) -> np.ndarray:
        """Values at reference points tabulated as ``ref_values`` (npts, nloc) on every cell."""
        return self.local @ ref_values.T

    def cell_gradients(self, ref_grads: np.ndarray) -> np.ndarray:
        """Physical gradients, shape ``(ncell, npts, 2)``."""
        g = np.einsum("cl,qld->cqd", self.local, ref_grads)
        return g / self.space.mesh.cell_size[:, None, :]

    def __call__(self, point) -> float:
        return evaluate(self, point)


def _check_same(a: FeFunction, b: FeFunction) -> None:
    if a.space is not b.space:
        raise SpaceError("functions live on different spaces")


def build_space(mesh: Mesh, degree: int, dirichlet_markers=("all",)) -> FeSpace:
    return FeSpace(mesh, degree, dirichlet_markers)


def evaluate(f: FeFunction, point) -> float:
    """Point value of ``f``; raises :class:`MeshError` outside the domain."""
    dofs, v, _ = f.space.basis_at(point)
    return float(v @ f.coef[dofs])


def evaluate_gradient(f: FeFunction, point) -> np.ndarray:
    dofs, _, g = f.space.basis_at(point)
    return f.coef[dofs] @ g


def interpolate(space: FeSpace, g) -> FeFunction:
    """Nodal interpolant of the callable ``g(x, y)`` (vectorized over arrays)."""
    x, y = space.node_coords[:, 0], space.node_coords[:, 1]
    vals = np.broadcast_to(np.asarray(g(x, y), dtype=float), x.shape).copy()
    return FeFunction(space, space.distribute(vals))


def transfer(f: FeFunction, target: FeSpace) -> FeFunction:
    """Evaluate ``f`` at the nodes of ``target`` (same mesh) and make it conforming."""
    if f.space.mesh is not target.mesh:
        raise SpaceError("transfer requires both spaces on the same mesh")
    v, _ = f.space.tabulate(reference_nodes(target.degree))
    vals = f.cell_values(v)
    coef = np.zeros(target.n_dofs)
    coef[target.cell_dofs] = vals
    return FeFunction(target, target.distribute(coef))


def interpolate_patch(f: FeFunction, target: FeSpace | None = None) -> FeFunction:
    """Patchwise higher-order interpolant of a Q_k function.

    On each parent of four active children the (2k+1)^2 nodal values of
    ``f`` define a Q_{2k} polynomial; the result is that piecewise
    polynomial written in a Q_{2k} space on the active mesh.
    """
    k = f.space.degree
    mesh = f.space.mesh
    if k not in (1, 2):
        raise SpaceError("patch interpolation is available for k = 1, 2")
    if not mesh.patch_structure():
        raise PatchStructureError("mesh has no complete patch structure")
    if target is None:
        target = FeSpace(mesh, 2 * k, f.space.dirichlet_markers)
    elif target.degree != 2 * k or target.mesh is not mesh:
        raise SpaceError("target must be Q_2k on the same mesh")
    child_nodes = reference_nodes(2 * k)
    # child position (a, b) -> matrix from patch values to child Q_2k nodal values
    maps = {}
    for b in (0, 1):
        for a in (0, 1):
            pts = (child_nodes + np.array([a, b])) / 2.0
            maps[(a, b)] = tabulate(2 * k, pts)[0]
    idx = {int(c): n for n, c in enumerate(mesh.active)}
    coef = np.zeros(target.n_dofs)
    patch_n = 2 * k + 1
    local = f.local
    for parent_id in sorted({mesh.cells[c].parent for c in mesh.active}):
        kids = mesh.cells[parent_id].children
        patch = np.zeros(patch_n * patch_n)
        for pos, child in enumerate(kids):
            a, b = pos % 2, pos // 2
            vals = local[idx[child]].reshape(k + 1, k + 1)  # [q, p]
            for q in range(k + 1):
                for p in range(k + 1):
                    patch[(a * k + p) + patch_n * (b * k + q)] = vals[q, p]
        for pos, child in enumerate(kids):
            a, b = pos % 2, pos // 2
            coef[target.cell_dofs[idx[child]]] = maps[(a, b)] @ patch
    return FeFunction(target, target.distribute(coef))


class PatchStructureError(SpaceError):
    """Raised when the mesh cannot be grouped into complete sibling patches."""


def pu_basis(mesh: Mesh, degree: int = 1) -> FeSpace:
    """Partition-of-unity space: conforming Q_degree basis without Dirichlet nodes."""
    if not 1 <= degree <= 3:
        raise SpaceError("PU degree must be in 1..3")
    return FeSpace(mesh, degree, dirichlet_markers=())


PuSpace = FeSpace



def prolongate(f: FeFunction, target: FeSpace) -> FeFunction:
    """Evaluate ``f`` on a refined mesh.

    ``target.mesh`` must be obtained from ``f.space.mesh`` by refinement;
    every new cell is mapped into its active ancestor on the old mesh.
    """
    old, new = f.space.mesh, target.mesh
    if old.spec != new.spec:
        raise SpaceError("meshes do not share the initial grid")
    anc = np.empty(new.n_active, dtype=np.int64)
    for n in range(new.n_active):
        cid = int(new.active[n])
        while not (cid < len(old.cells) and old.is_active(cid)):
            cid = new.cells[cid].parent
            if cid is None:
                raise SpaceError("target mesh is not a refinement of the source mesh")
        anc[n] = old.active_index[cid]
    nodes = reference_nodes(target.degree)
    phys = new.cell_origin[:, None, :] + nodes[None, :, :] * new.cell_size[:, None, :]
    ref = (phys - old.cell_origin[anc][:, None, :]) / old.cell_size[anc][:, None, :]
    vals, _ = f.space.tabulate(ref.reshape(-1, 2))
    vals = vals.reshape(new.n_active, len(nodes), -1)
    local = np.einsum("cnl,cl->cn", vals, f.local[anc])
    coef = np.zeros(target.n_dofs)
    coef[target.cell_dofs] = local
    return FeFunction(target, target.distribute(coef))


__all__ = [
    "FeSpace", "FeFunction", "PuSpace", "SpaceError", "PatchStructureError", "MeshError",
    "build_space", "evaluate", "evaluate_gradient", "interpolate", "transfer",
    "interpolate_patch", "pu_basis", "prolongate",
]
