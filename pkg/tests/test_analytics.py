import pytest

from hiernas.analytics import (
    DECODER_CHANNELS,
    LOW_LEVEL_CHANNELS,
    LayerSpec,
    build_final_plan,
    count_multiply_adds,
    count_params,
    model_stats,
)
from hiernas.common import InvalidArgumentError, ValidationError
from hiernas.network import DiscreteNet
from hiernas.search_space import NetworkPath


def test_layer_spec_conventions():
    conv = LayerSpec("c", "conv", "body", 8, 16, 10, 10, kernel=3, bias=True)
    assert conv.params == 9 * 8 * 16 + 16
    assert conv.multiply_adds == 9 * 8 * 16 * 100
    depthwise = LayerSpec("dw", "conv", "body", 8, 8, 10, 10, kernel=5, groups=8, dilation=2)
    assert depthwise.params == 25 * 8
    assert depthwise.multiply_adds == 25 * 8 * 100
    bn = LayerSpec("bn", "bn", "body", 16, 16, 10, 10)
    assert (bn.params, bn.multiply_adds) == (32, 0)
    pool = LayerSpec("p", "pool", "body", 16, 16, 10, 10)
    assert (pool.params, pool.multiply_adds) == (0, 0)


@pytest.mark.parametrize("branches", [3, 5])
def test_plan_params_match_instantiated_network(cell3, path4, branches):
    plan = build_final_plan(cell3, path4, 4, 5, aspp_branches=branches)
    net = DiscreteNet(cell3, path4, 4, 5, stem="deep", aspp_branches=branches)
    assert count_params(plan) == count_params(net.params)


def test_plan_row_names_are_network_parameters(cell3, path4):
    plan = build_final_plan(cell3, path4, 4, 5)
    net = DiscreteNet(cell3, path4, 4, 5, stem="deep")
    conv_rows = [r for r in plan.layer_specs(64, 64) if r.kind == "conv"]
    for row in conv_rows:
        name = row.name if row.name.endswith((".dw", ".pw")) else f"{row.name}.w"
        assert name in net.params, name


def test_cost_grows_with_filter_multiplier(cell3):
    path = NetworkPath((4, 8, 16, 16, 32, 32, 16, 8, 8, 8, 16, 16))
    stats = [model_stats(build_final_plan(cell3, path, f, 19), 1024, 2048) for f in (20, 32, 48)]
    assert stats[0].params < stats[1].params < stats[2].params
    assert stats[0].multiply_adds < stats[1].multiply_adds < stats[2].multiply_adds


def test_multiply_adds_scale_with_area_except_pooling(cell3, path4):
    plan = build_final_plan(cell3, path4, 4, 5)
    small = count_multiply_adds(plan, 64, 64)
    large = count_multiply_adds(plan, 128, 128)
    assert 3 * small < large <= 4 * small


def test_low_level_decoder_stub(cell3, path4):
    plain = build_final_plan(cell3, path4, 4, 5)
    decoded = build_final_plan(cell3, path4, 4, 5, low_level_decoder=True)
    assert plain.head_upsample_ratio == path4[-1]
    assert decoded.head_upsample_ratio == 4
    stats = model_stats(decoded, 64, 64)
    stages = stats.by_stage()
    assert set(stages) == {"stem", "body", "head", "decoder"}
    low = next(r for r in stats.rows if r.name == "decoder.low")
    assert (low.c_in, low.c_out) == (128, LOW_LEVEL_CHANNELS)
    convs = [r for r in stats.rows if r.name.startswith("decoder.conv") and r.kind == "conv"]
    assert [r.c_out for r in convs] == [DECODER_CHANNELS, DECODER_CHANNELS]
    assert stats.params > model_stats(plain, 64, 64).params


def test_stats_table_and_dict(cell3, path4):
    stats = model_stats(build_final_plan(cell3, path4, 4, 5), 64, 128)
    payload = stats.to_dict()
    assert payload["input_size"] == [64, 128]
    assert payload["params"] == sum(s["params"] for s in payload["stages"].values())
    table = stats.to_table().splitlines()
    assert table[0].split()[0] == "layer"
    assert table[-1].split()[1:] == [str(stats.params), str(stats.multiply_adds)]


def test_counting_requires_explicit_size(cell3, path4):
    plan = build_final_plan(cell3, path4, 4, 5)
    with pytest.raises(InvalidArgumentError):
        count_multiply_adds(plan)
    with pytest.raises(InvalidArgumentError):
        plan.layer_specs(100, 64)
    with pytest.raises(InvalidArgumentError):
        count_params("model")


def test_build_final_plan_validates(cell3):
    with pytest.raises(ValidationError):
        build_final_plan(cell3, NetworkPath((4, 32)), 4, 5)
    with pytest.raises(ValidationError):
        build_final_plan(cell3, NetworkPath((4,)), 4, 5, aspp_branches=4)
