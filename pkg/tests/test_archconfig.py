import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from lhunet import archconfig as A
from lhunet.archconfig import ConfigError, ScheduleParseError, parse_schedule


# ------------------------------------------------------------ schedule grammar

def test_parse_ssc_ddd():
    s = parse_schedule("SSC-DDD")
    assert s.vit_kinds == ("S", "S", "C")
    assert s.cnn_kinds == ("D", "D", "D")


def test_parse_sc_dd():
    s = parse_schedule("SC-DD")
    assert s.vit_kinds == ("S", "C") and s.cnn_kinds == ("D", "D")


def test_bad_letter_reports_position():
    with pytest.raises(ScheduleParseError) as e:
        parse_schedule("SSQ-DDD")
    assert e.value.position == 2


def test_bad_cnn_letter_position_counts_from_string_start():
    with pytest.raises(ScheduleParseError) as e:
        parse_schedule("SS-DX")
    assert e.value.position == 4


def test_unequal_halves():
    with pytest.raises(ScheduleParseError, match="unequal"):
        parse_schedule("SSC-DD")


@pytest.mark.parametrize("text", ["", "-", "-DDD", "SSC-", "III", "SSC--DDD", "ssc-ddd", "SSC DDD"])
def test_malformed(text):
    with pytest.raises(ScheduleParseError):
        parse_schedule(text)


@pytest.mark.parametrize("text", A.table4_schedules())
def test_table4_round_trip(text):
    assert parse_schedule(text).render() == text
    assert A.render_schedule(parse_schedule(text)) == text


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.text(alphabet="SC", min_size=n, max_size=n), st.text(alphabet="DLI", min_size=n, max_size=n))))
def test_round_trip_property(halves):
    text = "-".join(halves)
    assert parse_schedule(text).render() == text
    assert A.is_schedule(text)


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="SCDLI-QX ", max_size=12))
def test_parse_is_total(text):
    try:
        s = parse_schedule(text)
    except ScheduleParseError as e:
        assert e.position is None or 0 <= e.position <= len(text)
        assert not A.is_schedule(text)
    else:
        assert s.render() == text
        assert A.is_schedule(text)


# ------------------------------------------------------------ presets and validation

def test_brats_preset():
    arch, train = A.preset("brats")
    assert arch.patch_size == (128, 128, 128)
    assert train.base_lr == 0.01
    assert arch.downsample == ((2, 2, 2),) * 5


def test_synapse_preset():
    arch, train = A.preset("synapse")
    assert arch.patch_size == (128, 128, 64)
    assert train.base_lr == 0.003
    assert arch.downsample == ((2, 2, 1),) + ((2, 2, 2),) * 4


def test_lung_preset_follows_printed_schedule():
    arch, train = A.preset("lung")
    assert arch.downsample == ((2, 2, 1), (2, 2, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2))
    assert arch.n_stages == len(arch.downsample)
    assert train.base_lr == 0.003


def test_toy8_preset():
    arch, _ = A.preset("toy8")
    assert arch.patch_size == (32, 32, 32)
    assert arch.schedule.render() == "SC-DD"
    assert arch.stage_widths == tuple(w // 4 for w in A.DEFAULT_WIDTHS[:4])


def test_presets_are_valid():
    for name in A.PRESETS:
        assert A.validate(A.preset(name)[0]) == [], name


def test_unknown_preset():
    with pytest.raises(ConfigError):
        A.preset("kidney")


def test_train_defaults():
    t = A.TrainSpec()
    assert (t.momentum, t.weight_decay, t.poly_power, t.loss_weights) == (0.99, 3e-5, 0.9, (1.0, 1.0))


@pytest.mark.parametrize("kw", [dict(base_lr=0), dict(momentum=1.0), dict(poly_power=0), dict(epochs=0)])
def test_train_invariants(kw):
    with pytest.raises(ConfigError):
        A.TrainSpec(**kw)


def test_divisibility_violation_axis0():
    arch, _ = A.preset("brats")
    bad = dataclasses.replace(arch, patch_size=(30, 32, 32))
    problems = A.validate(bad)
    assert any("axis 0" in p and "divide" in p for p in problems)
    assert not any("axis 1" in p for p in problems)


def test_head_divisibility_violation():
    arch, _ = A.preset("toy8")
    bad = dataclasses.replace(arch, stage_widths=(4, 8, 16, 32), n_heads=3)
    problems = A.validate(bad)
    assert any("n_heads" in p for p in problems)


def test_length_violation():
    arch, _ = A.preset("toy8")
    bad = dataclasses.replace(arch, stage_widths=arch.stage_widths[:3])
    assert any("lengths" in p for p in A.validate(bad))


def test_projection_length_violation_only_on_spatial_stages():
    arch, _ = A.preset("toy8")  # stages at 4^3=64 (S) and 2^3=8 (C) tokens
    assert A.validate(dataclasses.replace(arch, kv_projection_len=32)) == []
    problems = A.validate(dataclasses.replace(arch, kv_projection_len=64))
    assert len(problems) == 1 and "p=64" in problems[0]


def test_resblock_expansion_rule():
    arch, _ = A.preset("toy8")
    bad = dataclasses.replace(arch, stage_widths=(8, 12, 36, 56))
    assert any("ResBlock" in p for p in A.validate(bad))


def test_factor_domain():
    arch, _ = A.preset("toy8")
    bad = dataclasses.replace(arch, downsample=((4, 2, 2),) + arch.downsample[1:])
    assert any("not in {1, 2}" in p for p in A.validate(bad))


def test_check_raises():
    arch, _ = A.preset("toy8")
    with pytest.raises(ConfigError):
        A.check(dataclasses.replace(arch, n_heads=5))


def test_stage_shapes_anisotropic():
    arch, _ = A.preset("synapse")
    assert arch.stage_shapes()[0] == (64, 64, 64)
    assert arch.stage_shapes()[-1] == (4, 4, 4)


def test_stage_kinds():
    arch, _ = A.preset("brats")
    assert arch.stage_kinds() == [None, None, ("S", "D"), ("S", "D"), ("C", "D")]


def test_with_schedule_truncates_and_extends():
    arch, _ = A.preset("brats")
    short = arch.with_schedule("SC-DD")
    assert short.n_stages == 4 and short.stage_widths == arch.stage_widths[:4]
    toy, _ = A.preset("toy8")
    longer = toy.with_schedule("SSC-DDD")
    assert longer.n_stages == 5 and longer.stage_widths[-1] == 2 * toy.stage_widths[-1]


# ------------------------------------------------------------ serialization

def test_dict_round_trip_and_hash():
    for name in A.PRESETS:
        arch, train = A.preset(name)
        assert A.ArchSpec.from_dict(json.loads(json.dumps(arch.to_dict()))) == arch
        assert A.TrainSpec.from_dict(json.loads(json.dumps(train.to_dict()))) == train
    a, _ = A.preset("brats")
    b, _ = A.preset("la")
    assert a.spec_hash() != b.spec_hash()
    assert a.spec_hash() == A.ArchSpec.from_dict(a.to_dict()).spec_hash()


def test_from_dict_unknown_key():
    arch, _ = A.preset("toy8")
    with pytest.raises(ConfigError):
        A.ArchSpec.from_dict({**arch.to_dict(), "widths": [1]})


def test_load_config_overrides(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"arch": {"kv_projection_len": 8}, "train": {"base_lr": 0.02}, "data": {"dir": "x"}}))
    cfg = A.load_config("toy8", p)
    assert cfg.arch.kv_projection_len == 8
    assert cfg.train.base_lr == 0.02
    assert cfg.train.momentum == 0.99
    assert cfg.data == {"dir": "x"}


@pytest.mark.parametrize("payload", [{"model": {}}, {"arch": {"n_head": 2}}, {"train": {"lr": 1}}, [1, 2]])
def test_load_config_rejects_unknown(tmp_path, payload):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        A.load_config("toy8", p)


def test_load_config_schedule_override_is_validated():
    assert A.load_config("brats", schedule="SC-DD").arch.n_stages == 4
    with pytest.raises(ScheduleParseError):
        A.load_config("brats", schedule="SX-DD")
