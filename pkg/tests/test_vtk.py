import numpy as np
import pytest

from dgpc.forms import FormParams
from dgpc.mesh import build_mesh
from dgpc.mms import BELTRAMI, taylor_green
from dgpc.stepping import PressureCorrectionScheme, StepConfig
from dgpc.vtk import export_fields, sample_points


def read_legacy_vtk(path):
    """Minimal reader for the files written by the exporter: points, cells, types and point arrays."""
    tokens = open(path).read().split("\n")
    out = {"arrays": {}}
    i = 4
    while i < len(tokens):
        line = tokens[i].split()
        i += 1
        if not line:
            continue
        head = line[0]
        if head == "POINTS":
            n = int(line[1])
            out["points"] = np.array([list(map(float, tokens[i + j].split())) for j in range(n)])
            i += n
        elif head == "CELLS":
            n = int(line[1])
            out["cells"] = [list(map(int, tokens[i + j].split()))[1:] for j in range(n)]
            i += n
        elif head == "CELL_TYPES":
            n = int(line[1])
            out["types"] = [int(tokens[i + j]) for j in range(n)]
            i += n
        elif head == "VECTORS":
            n = len(out["points"])
            out["arrays"][line[1]] = np.array([list(map(float, tokens[i + j].split())) for j in range(n)])
            i += n
        elif head == "SCALARS":
            n = len(out["points"])
            i += 1  # lookup table line
            out["arrays"][line[1]] = np.array([float(tokens[i + j]) for j in range(n)])
            i += n
    return out


def state_for(mesh, k1, velocity):
    scheme = PressureCorrectionScheme(mesh, k1, k1 - 1, StepConfig(0.1, 1, FormParams()))
    return scheme.initialize(velocity)


def test_single_element_layout(tmp_path):
    state = state_for(build_mesh(0, 1, 1, dim=3), 1, lambda x: np.tile([1.0, 2.0, 3.0], (len(x), 1)))
    path = tmp_path / "one.vtk"
    export_fields(state, path)
    data = read_legacy_vtk(path)
    assert data["points"].shape == (8, 3)
    assert data["cells"] == [[0, 1, 3, 2, 4, 5, 7, 6]]
    assert data["types"] == [12]
    assert sorted(data["arrays"]) == ["p", "phi", "u"]
    np.testing.assert_allclose(data["arrays"]["u"], np.tile([1.0, 2.0, 3.0], (8, 1)), atol=1e-12)
    assert not np.any(data["arrays"]["p"])


def test_hexahedra_have_positive_volume(tmp_path):
    state = state_for(build_mesh(0, 1, 2, dim=3), 1, lambda x: x)
    export_fields(state, tmp_path / "f.vtk", subdivisions=2)
    data = read_legacy_vtk(tmp_path / "f.vtk")
    assert len(data["cells"]) == 8 * 8 and data["points"].shape == (8 * 27, 3)
    for cell in data["cells"]:
        p = data["points"][cell]
        # VTK hexahedron ordering: bottom face counter-clockwise, then the top face
        a, b, d = p[1] - p[0], p[3] - p[0], p[4] - p[0]
        assert np.dot(np.cross(a, b), d) > 0
        np.testing.assert_allclose(p[1] + p[3] - p[0], p[2])


def test_values_round_trip(tmp_path):
    mesh = build_mesh(0, 1, 2, dim=3)
    state = state_for(mesh, 2, lambda x: BELTRAMI.velocity(x, 0.0))
    export_fields(state, tmp_path / "b.vtk", subdivisions=3)
    data = read_legacy_vtk(tmp_path / "b.vtk")
    pts = sample_points(state, 3)
    np.testing.assert_allclose(data["points"], pts, atol=1e-9)
    # every point belongs to one element; evaluate the element polynomial there
    per = 4**3
    for e in range(mesh.n_elements):
        block = slice(e * per, (e + 1) * per)
        lower = mesh.element_lower[e]
        xi = 2.0 * (pts[block] - lower) / mesh.spacing - 1.0
        ref = state.u.evaluate_reference(xi)[:, e, :].T
        np.testing.assert_allclose(data["arrays"]["u"][block], ref, rtol=1e-7, atol=1e-9)


def test_two_dimensional_quads(tmp_path):
    tg = taylor_green()
    state = state_for(build_mesh(0, np.pi, 3, dim=2), 2, lambda x: tg.velocity(x, 0.0))
    export_fields(state, tmp_path / "sub" / "q.vtk")
    data = read_legacy_vtk(tmp_path / "sub" / "q.vtk")
    assert set(data["types"]) == {9} and len(data["cells"]) == 9
    assert np.all(data["points"][:, 2] == 0) and np.all(data["arrays"]["u"][:, 2] == 0)


def test_subdivisions_must_be_positive(tmp_path):
    state = state_for(build_mesh(0, 1, 1, dim=3), 1, None)
    with pytest.raises(ValueError):
        export_fields(state, tmp_path / "x.vtk", subdivisions=0)
