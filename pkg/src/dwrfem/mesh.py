"""Hierarchical quadrilateral meshes on axis-aligned rectangular domains.

Cells are addressed by ``(level, i, j)``: level-0 cells form the initial
``nx x ny`` grid and the children of ``(l, i, j)`` are
``(l + 1, 2i + a, 2j + b)`` for ``a, b in {0, 1}``.  Vertex positions are
kept as integers on a dyadic lattice so that coincidence tests are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MAXLEV = 30
SCALE = 1 << MAXLEV

# (di, dj) for west, east, south, north
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MeshError(ValueError):
    """Invalid domain or mesh configuration."""


@dataclass(frozen=True)
class DomainSpec:
    """Rectangular domain split into ``nx x ny`` cells, minus some boxes.

    ``removed_boxes`` are ``(x0, y0, x1, y1)`` tuples that must align with
    the initial cell boundaries.
    """

    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    nx: int = 1
    ny: int = 1
    removed_boxes: tuple[tuple[float, float, float, float], ...] = ()

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        holes = sum((b[2] - b[0]) * (b[3] - b[1]) for b in self.removed_boxes)
        return (x1 - x0) * (y1 - y0) - holes


@dataclass
class _Cell:
    level: int
    i: int
    j: int
    parent: int | None
    children: tuple[int, int, int, int] | None = None


@dataclass(eq=False)
class Mesh:
    """Refinement tree plus the derived active-cell view.

    Instances are treated as immutable: :func:`refine` returns a new mesh.
    """

    spec: DomainSpec
    cells: list[_Cell]
    lookup: dict[tuple[int, int, int], int] = field(repr=False)

    # ------------------------------------------------------------------
    # geometry helpers
    @property
    def h0(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.spec.bbox
        return (x1 - x0) / self.spec.nx, (y1 - y0) / self.spec.ny

    def lattice_to_xy(self, ij: np.ndarray) -> np.ndarray:
        """Map integer lattice coordinates (units of ``h0 / SCALE``) to x, y."""
        ij = np.asarray(ij, dtype=float)
        hx, hy = self.h0
        out = np.empty_like(ij)
        out[..., 0] = self.spec.bbox[0] + ij[..., 0] * (hx / SCALE)
        out[..., 1] = self.spec.bbox[1] + ij[..., 1] * (hy / SCALE)
        return out

    def is_active(self, cid: int) -> bool:
        return self.cells[cid].children is None

    @cached_property
    def active(self) -> np.ndarray:
        """Ids of active cells in increasing order."""
        return np.array([c for c, cell in enumerate(self.cells) if cell.children is None], dtype=np.int64)

    @property
    def n_active(self) -> int:
        return len(self.active)

    @cached_property
    def active_index(self) -> dict[int, int]:
        """Cell id -> position in :attr:`active`."""
        return {int(c): k for k, c in enumerate(self.active)}

    @cached_property
    def cell_level(self) -> np.ndarray:
        return np.array([self.cells[c].level for c in self.active], dtype=np.int64)

    @cached_property
    def cell_origin_lattice(self) -> np.ndarray:
        """Lower-left corner of each active cell on the integer lattice."""
        out = np.empty((self.n_active, 2), dtype=np.int64)
        for k, c in enumerate(self.active):
            cell = self.cells[c]
            step = 1 << (MAXLEV - cell.level)
            out[k] = (cell.i * step, cell.j * step)
        return out

    @cached_property
    def cell_step_lattice(self) -> np.ndarray:
        return np.array([1 << (MAXLEV - lev) for lev in self.cell_level], dtype=np.int64)

    @cached_property
    def cell_origin(self) -> np.ndarray:
        return self.lattice_to_xy(self.cell_origin_lattice)

    @cached_property
    def cell_size(self) -> np.ndarray:
        hx, hy = self.h0
        scale = 0.5 ** self.cell_level.astype(float)
        return np.stack([hx * scale, hy * scale], axis=1)

    @cached_property
    def cell_area(self) -> np.ndarray:
        return self.cell_size[:, 0] * self.cell_size[:, 1]

    # ------------------------------------------------------------------
    # vertices
    @cached_property
    def _vertex_data(self) -> tuple[np.ndarray, np.ndarray, dict]:
        keys: dict[tuple[int, int], int] = {}
        cell_vertices = np.empty((self.n_active, 4), dtype=np.int64)
        corners = ((0, 0), (1, 0), (1, 1), (0, 1))
        for k in range(self.n_active):
            ox, oy = self.cell_origin_lattice[k]
            s = self.cell_step_lattice[k]
            for a, (dx, dy) in enumerate(corners):
                key = (int(ox + dx * s), int(oy + dy * s))
                vid = keys.setdefault(key, len(keys))
                cell_vertices[k, a] = vid
        lattice = np.array(list(keys.keys()), dtype=np.int64).reshape(-1, 2)
        return lattice, cell_vertices, keys

    @property
    def vertex_lattice(self) -> np.ndarray:
        return self._vertex_data[0]

    @property
    def vertices(self) -> np.ndarray:
        """Coordinates of all vertices of active cells, shape ``(nv, 2)``."""
        return self.lattice_to_xy(self.vertex_lattice)

    @property
    def cell_vertices(self) -> np.ndarray:
        """Counter-clockwise vertex ids per active cell."""
        return self._vertex_data[1]

    @property
    def vertex_ids(self) -> dict[tuple[int, int], int]:
        return self._vertex_data[2]

    # ------------------------------------------------------------------
    # neighbours
    def neighbor(self, cid: int, direction: int) -> tuple[str, int | None]:
        """Classify the region across one edge of cell ``cid``.

        Returns ``("same", id)`` for an equal-level cell (active or refined),
        ``("coarser", id)`` for an active cell one level up, and
        ``("boundary", None)`` when the edge lies on the domain boundary.
        """
        cell = self.cells[cid]
        di, dj = DIRECTIONS[direction]
        key = (cell.level, cell.i + di, cell.j + dj)
        nid = self.lookup.get(key)
        if nid is not None:
            return "same", nid
        lev, ni, nj = key
        while lev > 0:
            lev, ni, nj = lev - 1, ni // 2, nj // 2
            nid = self.lookup.get((lev, ni, nj))
            if nid is not None:
                return "coarser", nid
        return "boundary", None

    @cached_property
    def edge_neighbors(self) -> list[list[tuple[str, int | None]]]:
        """Per active cell, the neighbour classification of its 4 edges."""
        return [[self.neighbor(int(c), d) for d in range(4)] for c in self.active]

    def boundary_edges(self) -> list[tuple[int, int, str]]:
        """``(active index, direction, marker)`` for every boundary edge."""
        out = []
        x0, y0, x1, y1 = self.spec.bbox
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        for k, nbrs in enumerate(self.edge_neighbors):
            ox, oy = self.cell_origin[k]
            hx, hy = self.cell_size[k]
            for d, (kind, _) in enumerate(nbrs):
                if kind != "boundary":
                    continue
                if d == 0 and abs(ox - x0) < tol:
                    name = "left"
                elif d == 1 and abs(ox + hx - x1) < tol:
                    name = "right"
                elif d == 2 and abs(oy - y0) < tol:
                    name = "bottom"
                elif d == 3 and abs(oy + hy - y1) < tol:
                    name = "top"
                else:
                    name = "hole"
                out.append((k, d, name))
        return out

    @cached_property
    def boundary_markers(self) -> dict[tuple[int, int], str]:
        """Map ``(vertex id, vertex id)`` of each boundary edge to its segment name."""
        ends = ((0, 3), (1, 2), (0, 1), (3, 2))
        out = {}
        for k, d, name in self.boundary_edges():
            a, b = ends[d]
            out[(int(self.cell_vertices[k, a]), int(self.cell_vertices[k, b]))] = name
        return out

    # ------------------------------------------------------------------
    def locate(self, point) -> int:
        """Active-cell index containing ``point`` (closed cells, first match)."""
        x, y = float(point[0]), float(point[1])
        bx0, by0, bx1, by1 = self.spec.bbox
        hx, hy = self.h0
        span = 1e-12 * max(bx1 - bx0, by1 - by0)
        if not (bx0 - span <= x <= bx1 + span and by0 - span <= y <= by1 + span):
            raise MeshError(f"point {(x, y)} outside the domain")
        fx = min(max((x - bx0) / hx, 0.0), self.spec.nx)
        fy = min(max((y - by0) / hy, 0.0), self.spec.ny)
        eps = 1e-12
        i_candidates = {min(int(np.floor(fx)), self.spec.nx - 1)}
        j_candidates = {min(int(np.floor(fy)), self.spec.ny - 1)}
        if abs(fx - round(fx)) < eps:
            i_candidates |= {int(round(fx)) - 1, min(int(round(fx)), self.spec.nx - 1)}
        if abs(fy - round(fy)) < eps:
            j_candidates |= {int(round(fy)) - 1, min(int(round(fy)), self.spec.ny - 1)}
        for i in sorted(i_candidates):
            for j in sorted(j_candidates):
                cid = self.lookup.get((0, i, j))
                if cid is None:
                    continue
                found = self._descend(cid, fx - i, fy - j)
                if found is not None:
                    return self.active_index[found]
        raise MeshError(f"point {(x, y)} outside the domain")

    def _descend(self, cid: int, u: float, v: float) -> int | None:
        eps = 1e-10
        if not (-eps <= u <= 1 + eps and -eps <= v <= 1 + eps):
            return None
        while self.cells[cid].children is not None:
            a = 1 if u >= 0.5 else 0
            b = 1 if v >= 0.5 else 0
            cid = self.cells[cid].children[a + 2 * b]
            u, v = 2 * u - a, 2 * v - b
        return cid

    def reference_coords(self, k: int, point) -> np.ndarray:
        """Coordinates of ``point`` in the unit reference square of active cell ``k``."""
        p = np.asarray(point, dtype=float)
        return np.clip((p - self.cell_origin[k]) / self.cell_size[k], 0.0, 1.0)

    # ------------------------------------------------------------------
    @property
    def total_area(self) -> float:
        return float(self.cell_area.sum())

    def check_one_irregular(self) -> bool:
        """Brute-force check: across every edge the level jump is at most one."""
        for k, c in enumerate(self.active):
            lev = self.cells[c].level
            for kind, nid in self.edge_neighbors[k]:
                if kind == "coarser" and self.cells[nid].level != lev - 1:
                    return False
        return True

    def patch_structure(self) -> bool:
        """True when every active cell has a parent whose 4 children are all active."""
        for c in self.active:
            p = self.cells[c].parent
            if p is None:
                return False
            if any(not self.is_active(ch) for ch in self.cells[p].children):
                return False
        return True


def build_grid(spec: DomainSpec) -> Mesh:
    """Level-0 mesh of ``nx * ny`` cells minus the removed boxes."""
    if spec.nx < 1 or spec.ny < 1:
        raise MeshError("nx and ny must be >= 1")
    x0, y0, x1, y1 = spec.bbox
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate bounding box")
    hx, hy = (x1 - x0) / spec.nx, (y1 - y0) / spec.ny
    removed: set[tuple[int, int]] = set()
    for box in spec.removed_boxes:
        bx0, by0, bx1, by1 = box
        if bx0 < x0 or by0 < y0 or bx1 > x1 or by1 > y1 or bx1 <= bx0 or by1 <= by0:
            raise MeshError(f"removed box {box} not inside the bounding box")
        fi = [(bx0 - x0) / hx, (bx1 - x0) / hx]
        fj = [(by0 - y0) / hy, (by1 - y0) / hy]
        if any(abs(f - round(f)) > 1e-9 for f in fi + fj):
            raise MeshError(f"removed box {box} does not align with the initial grid")
        for i in range(round(fi[0]), round(fi[1])):
            for j in range(round(fj[0]), round(fj[1])):
                removed.add((i, j))
    cells: list[_Cell] = []
    lookup: dict[tuple[int, int, int], int] = {}
    for j in range(spec.ny):
        for i in range(spec.nx):
            if (i, j) in removed:
                continue
            lookup[(0, i, j)] = len(cells)
            cells.append(_Cell(0, i, j, None))
    if not cells:
        raise MeshError("all cells removed")
    return Mesh(spec, cells, lookup)


def _closure(mesh: Mesh, marked) -> set[int]:
    to_refine = set()
    work = []
    for c in marked:
        c = int(c)
        if not mesh.is_active(c):
            raise MeshError(f"cell {c} is not active")
        if c not in to_refine:
            to_refine.add(c)
            work.append(c)
    while work:
        c = work.pop()
        for d in range(4):
            kind, nid = mesh.neighbor(c, d)
            if kind == "coarser" and nid not in to_refine:
                to_refine.add(nid)
                work.append(nid)
    return to_refine


def refine(mesh: Mesh, marked) -> Mesh:
    """Refine the marked active cells (ids into ``mesh.cells``) plus their closure.

    Neighbours that are one level coarser than a marked cell are refined as
    well, recursively, so that no edge ever carries more than one hanging node.
    """
    to_refine = _closure(mesh, marked)
    cells = [_Cell(c.level, c.i, c.j, c.parent, c.children) for c in mesh.cells]
    lookup = dict(mesh.lookup)
    for c in sorted(to_refine, key=lambda c: (mesh.cells[c].level, c)):
        cell = cells[c]
        kids = []
        for b in (0, 1):
            for a in (0, 1):
                key = (cell.level + 1, 2 * cell.i + a, 2 * cell.j + b)
                lookup[key] = len(cells)
                kids.append(len(cells))
                cells.append(_Cell(cell.level + 1, key[1], key[2], c))
        cell.children = tuple(kids)
    return Mesh(mesh.spec, cells, lookup)


def refine_uniform(mesh: Mesh, times: int = 1) -> Mesh:
    for _ in range(times):
        mesh = refine(mesh, mesh.active)
    return mesh


def hanging_nodes(mesh: Mesh) -> list[tuple[int, tuple[int, int]]]:
    """Vertices lying strictly inside an edge of a coarser active neighbour.

    Each entry is ``(vertex id, (endpoint id, endpoint id))`` where the
    endpoints are the corners of the coarse edge.
    """
    vids = mesh.vertex_ids
    seen: dict[int, tuple[int, int]] = {}
    for k, c in enumerate(mesh.active):
        for d, (kind, nid) in enumerate(mesh.edge_neighbors[k]):
            if kind != "coarser":
                continue
            coarse = mesh.cells[nid]
            s = 1 << (MAXLEV - coarse.level)
            cx, cy = coarse.i * s, coarse.j * s
            # the coarse edge facing cell c
            if d == 0:
                ends = ((cx + s, cy), (cx + s, cy + s))
            elif d == 1:
                ends = ((cx, cy), (cx, cy + s))
            elif d == 2:
                ends = ((cx, cy + s), (cx + s, cy + s))
            else:
                ends = ((cx, cy), (cx + s, cy))
            mid = ((ends[0][0] + ends[1][0]) // 2, (ends[0][1] + ends[1][1]) // 2)
            vid = vids[mid]
            seen[vid] = (vids[ends[0]], vids[ends[1]])
    return sorted(seen.items())


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "dwrfem mesh") -> None:
    """Legacy ASCII VTK unstructured grid (quads, cell type 9).

    ``point_data`` arrays are indexed by mesh vertex id, ``cell_data`` by
    active-cell index.
    """
    verts = mesh.vertices
    cv = mesh.cell_vertices
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(verts)} double"]
    lines += [f"{x:.16g} {y:.16g} 0" for x, y in verts]
    lines.append(f"CELLS {len(cv)} {5 * len(cv)}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in cv]
    lines.append(f"CELL_TYPES {len(cv)}")
    lines += ["9"] * len(cv)
    if point_data:
        lines.append(f"POINT_DATA {len(verts)}")
        for name, values in point_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.16g}" for v in np.asarray(values, dtype=float)]
    if cell_data:
        lines.append(f"CELL_DATA {len(cv)}")
        for name, values in cell_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.16g}" for v in np.asarray(values, dtype=float)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
