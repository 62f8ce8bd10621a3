import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwrfem.mesh import (DomainSpec, MeshError, build_grid, hanging_nodes, refine,
                         refine_uniform, write_vtk)

from conftest import HOLES, UNIT, random_mesh


def test_build_grid_counts_and_area():
    mesh = build_grid(HOLES)
    assert mesh.n_active == 13
    assert mesh.total_area == pytest.approx(13.0)
    assert HOLES.area == pytest.approx(13.0)


@pytest.mark.parametrize("spec", [
    DomainSpec((0, 0, 1, 1), 0, 2),
    DomainSpec((0, 0, 0, 1), 2, 2),
    DomainSpec((0, 0, 1, 1), 2, 2, ((0.2, 0.2, 0.7, 0.7),)),
    DomainSpec((0, 0, 1, 1), 1, 1, ((0, 0, 1, 1),)),
])
def test_build_grid_rejects_bad_specs(spec):
    with pytest.raises(MeshError):
        build_grid(spec)


def test_refine_keeps_old_ids_and_appends_children(unit_mesh):
    m2 = refine(unit_mesh, [0])
    assert m2.n_active == 7
    assert len(m2.cells) == 8
    assert not m2.is_active(0)
    assert all(m2.is_active(c) for c in (1, 2, 3, 4, 5, 6, 7))
    assert unit_mesh.n_active == 4   # original untouched


def test_refine_inactive_cell_fails(unit_mesh):
    m2 = refine(unit_mesh, [0])
    with pytest.raises(MeshError):
        refine(m2, [0])


def test_closure_prevents_double_hanging(unit_mesh):
    m = refine(unit_mesh, [0])
    child = m.active[m.n_active - 1]   # last child of cell 0 touches the centre
    m = refine(m, [child])
    assert m.check_one_irregular()


def test_hanging_nodes_single_refinement(unit_mesh):
    m = refine(unit_mesh, [0])
    hn = hanging_nodes(m)
    # refining the lower-left cell leaves two hanging midpoints
    assert len(hn) == 2
    coords = m.vertices
    for vid, (a, b) in hn:
        np.testing.assert_allclose(coords[vid], 0.5 * (coords[a] + coords[b]))


def test_boundary_edges_cover_perimeter():
    mesh = refine_uniform(build_grid(HOLES), 1)
    length = {}
    size = mesh.cell_size
    for k, d, marker in mesh.boundary_edges():
        h = size[k][1] if d in (0, 1) else size[k][0]
        length[marker] = length.get(marker, 0.0) + h
    assert length["left"] == pytest.approx(3.0)
    assert length["right"] == pytest.approx(3.0)
    assert length["bottom"] == pytest.approx(5.0)
    assert length["top"] == pytest.approx(5.0)
    assert length["hole"] == pytest.approx(8.0)


def test_locate_and_reference_coords(hanging_mesh):
    for pt in [(0.1, 0.1), (0.5, 0.5), (0.99, 0.01), (0.3, 0.7)]:
        k = hanging_mesh.locate(pt)
        x0, y0 = hanging_mesh.cell_origin[k]
        hx, hy = hanging_mesh.cell_size[k]
        assert x0 - 1e-14 <= pt[0] <= x0 + hx + 1e-14
        assert y0 - 1e-14 <= pt[1] <= y0 + hy + 1e-14
        ref = hanging_mesh.reference_coords(k, pt)
        np.testing.assert_allclose([x0 + ref[0] * hx, y0 + ref[1] * hy], pt, atol=1e-14)


def test_locate_outside_raises():
    mesh = build_grid(HOLES)
    with pytest.raises(ValueError):
        mesh.locate((1.5, 1.5))   # inside a hole
    with pytest.raises(ValueError):
        mesh.locate((6.0, 0.5))


def test_patch_structure():
    mesh = build_grid(UNIT)
    assert not mesh.patch_structure()
    assert refine_uniform(mesh, 1).patch_structure()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 4))
def test_random_refinement_invariants(seed, steps):
    mesh = random_mesh(seed, steps)
    assert mesh.check_one_irregular()
    assert mesh.total_area == pytest.approx(1.0)
    assert np.all(mesh.cell_area > 0)
    # every hanging node is the midpoint of its coarse edge
    coords = mesh.vertices
    for vid, (a, b) in hanging_nodes(mesh):
        np.testing.assert_allclose(coords[vid], 0.5 * (coords[a] + coords[b]), atol=1e-14)


def test_write_vtk(tmp_path, hanging_mesh):
    path = tmp_path / "m.vtk"
    nv = len(hanging_mesh.vertices)
    write_vtk(path, hanging_mesh, point_data={"u": np.arange(nv)},
              cell_data={"eta": np.ones(hanging_mesh.n_active)})
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert f"POINTS {nv} double" in text
    assert f"CELLS {hanging_mesh.n_active} {5 * hanging_mesh.n_active}" in text
    assert f"POINT_DATA {nv}" in text and f"CELL_DATA {hanging_mesh.n_active}" in text
