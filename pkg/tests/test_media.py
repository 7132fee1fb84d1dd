import numpy as np
import pytest

from cemgms.grid import build_grid
from cemgms.media import (FractureSet, MediaError, PermeabilityField, fracture_segment,
                          kappa_tilde, load_fractures, load_permeability, partition_of_unity,
                          save_fractures, save_permeability, synth_channel_field,
                          three_fracture_network, uniform_field)


def _write_field(path, nfx, nfy, values):
    rows = np.asarray(values).reshape(nfy, nfx)
    path.write_text(f"{nfx} {nfy}\n" + "\n".join(" ".join(map(str, r)) for r in rows) + "\n")


def test_load_uniform(tmp_path):
    g = build_grid(200, 200, 10, 10)
    p = tmp_path / "k.txt"
    _write_field(p, 200, 200, np.ones(200 * 200))
    f = load_permeability(p, g)
    assert f.kappa_min == f.kappa_max == 1.0


def test_load_contrast_and_roundtrip(tmp_path):
    g = build_grid(8, 4, 2, 2)
    v = np.ones(32)
    v[5] = 1e4
    p = tmp_path / "k.txt"
    _write_field(p, 8, 4, v)
    f = load_permeability(p, g)
    assert f.contrast == 1e4
    save_permeability(tmp_path / "k2.txt", f)
    assert np.array_equal(load_permeability(tmp_path / "k2.txt", g).values, f.values)


def test_load_rejects_zero_with_cell(tmp_path):
    g = build_grid(4, 4, 2, 2)
    v = np.ones(16)
    v[11] = 0.0
    p = tmp_path / "k.txt"
    _write_field(p, 4, 4, v)
    with pytest.raises(MediaError, match="cell 11"):
        load_permeability(p, g)


def test_load_rejects_mismatch(tmp_path):
    p = tmp_path / "k.txt"
    _write_field(p, 4, 4, np.ones(16))
    with pytest.raises(MediaError, match="4x4"):
        load_permeability(p, build_grid(8, 8, 2, 2))


def test_synthetic_field():
    g = build_grid(200, 200, 10, 10)
    assert synth_channel_field(g, 1, 1.0, 8, 12).contrast == 1.0
    a = synth_channel_field(g, 7, 1e4, 8, 12)
    b = synth_channel_field(g, 7, 1e4, 8, 12)
    assert a.checksum() == b.checksum()
    assert a.contrast == pytest.approx(1e4)
    assert synth_channel_field(g, 8, 1e4, 8, 12).checksum() != a.checksum()


def test_partition_of_unity():
    g = build_grid(12, 8, 3, 2)
    pou = partition_of_unity(g)
    chi = pou.chi.toarray()
    assert np.allclose(chi.sum(axis=0), 1.0)
    x, y = g.node_coords()
    for v in range(g.n_vertices):
        vx, vy = g.vertex_coords(v)
        node = int(np.flatnonzero(np.isclose(x, vx) & np.isclose(y, vy))[0])
        assert np.allclose(chi[:, node], np.eye(g.n_vertices)[v])


def test_grad_sum_at_cell_centre():
    # each of the four hats has |grad|^2 = 1/(4H^2) + 1/(4H^2) at the centre
    g = build_grid(15, 15, 5, 5)  # odd ratio puts a fine-cell centre at each coarse centre
    pou = partition_of_unity(g)
    gs = pou.grad_sq_sum()
    cx, cy = g.cell_centers()
    centre = np.isclose(cx % g.H, g.H / 2) & np.isclose(cy % g.H, g.H / 2)
    assert centre.any()
    assert np.allclose(gs[centre], 2 / g.H ** 2)


def test_kappa_tilde():
    g = build_grid(20, 20, 5, 5)
    pou = partition_of_unity(g)
    one = uniform_field(g)
    kt = kappa_tilde(one, pou)
    assert np.allclose(kt, pou.grad_sq_sum())
    f = synth_channel_field(g, 3, 100.0, 3, 3)
    assert np.allclose(kappa_tilde(f.scaled(7.0), pou), 7.0 * kappa_tilde(f, pou))
    assert (kappa_tilde(f, pou) > 0).all()


def test_field_rejects_nan():
    with pytest.raises(MediaError):
        PermeabilityField(np.array([[1.0, np.nan]]))


def test_fracture_edge_count():
    g = build_grid(160, 160, 8, 8)
    s = fracture_segment(g, 0.25, 0.5, 0.75, 0.5, 1e4)
    assert len(s.edges) == 80
    x, y = g.node_coords()
    assert np.allclose(y[s.edges], 0.5)


def test_fracture_file(tmp_path):
    g = build_grid(160, 160, 8, 8)
    p = tmp_path / "f.txt"
    p.write_text("")
    assert len(load_fractures(p, g)) == 0
    p.write_text("# diagonal\n0.1 0.1 0.2 0.2 1e4\n")
    with pytest.raises(MediaError, match="axis-aligned"):
        load_fractures(p, g)
    p.write_text("0.1 0.5 0.7 0.5 1e4\n0.3 0.101 0.3 0.8 1e4\n")
    with pytest.raises(MediaError, match=":2:.*fine-grid node"):
        load_fractures(p, g)
    net = three_fracture_network(g)
    save_fractures(p, net)
    back = load_fractures(p, g)
    assert np.array_equal(back.edges, net.edges)
    assert np.array_equal(back.kappas, net.kappas)


def test_empty_fracture_set():
    fs = FractureSet()
    assert fs.edges.shape == (0, 2) and len(fs.kappas) == 0
