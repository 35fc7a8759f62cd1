import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimcsim.dnn import (DnnGraph, TilingError, WorkloadError, _tile_bytes, build_resnet18,
                         build_toy_cnn, plan_tiles)


def test_resnet18_parameters_and_shape(resnet):
    assert resnet.params() == 11_678_912
    convs = [l for l in resnet if l.kind == "conv2d"]
    assert len(convs) == 20
    assert resnet.sink.id == "L27" and resnet.sink.c_out == 1000
    assert [l.id for l in resnet if l.kind == "residual_add"] == [f"L{i}" for i in range(4, 26, 3)]
    assert {l.id for l in resnet if l.id.endswith("p")} == {"L10p", "L16p", "L22p"}


def test_resnet18_ops_per_image(resnet):
    assert resnet.ops_per_image() == pytest.approx(4.742e9, rel=1e-3)


def test_groups_by_ifm_height(resnet):
    g = resnet.groups()
    assert g[0] == ["L0"]
    assert "L12" in g[3]
    assert g[6] == ["L27"]


def test_round_trip(tmp_path, resnet):
    p = tmp_path / "w.json"
    resnet.dump(p)
    again = DnnGraph.load(p)
    assert again.to_dict() == resnet.to_dict()


def test_shape_mismatch_names_both_layers():
    g = build_toy_cnn()
    g["C1"].c_in = 9
    with pytest.raises(WorkloadError, match=r"edge C0 -> C1:.*8x32x32.*9x32x32"):
        g.validate()


def test_bad_builder_dims():
    with pytest.raises(WorkloadError):
        build_resnet18(image_h=100)


def test_unknown_predecessor():
    g = build_toy_cnn()
    g["C1"].predecessors = ["nope"]
    assert any("unknown predecessor" in v for v in g.violations())


@given(st.integers(16, 1 << 21))
def test_tile_plan_is_the_largest_fit(budget):
    l = build_resnet18()["L5"]
    try:
        t = plan_tiles(l, budget)
    except TilingError:
        ifm, ofm = _tile_bytes(l, 1, 1, 1)
        assert 2 * ifm + 2 * ofm > budget
        return
    assert 2 * t.ifm_tile_bytes + 2 * t.ofm_tile_bytes <= budget
    if t.tile_w < l.w_out:
        ifm, ofm = _tile_bytes(l, t.tile_w + 1, 1, 1)
        assert 2 * ifm + 2 * ofm > budget
    assert t.tiles_per_image * t.tile_w >= l.w_out > (t.tiles_per_image - 1) * t.tile_w


def test_input_cols_cover_halo():
    l = build_resnet18()["L0"]  # 7x7 stride 2 pad 3
    assert l.input_cols(0, 4) == (0, 10)
    assert l.input_cols(4, 8) == (5, 18)
