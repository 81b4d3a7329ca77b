import csv
import dataclasses
import io
import json
import math
import random

import pytest
import torch

from lhunet import analyzer as AN, archconfig as A, network as N, primitives as P

TOY8, _ = A.preset("toy8")
BRATS, _ = A.preset("brats")


def n_params(module) -> int:
    return sum(p.numel() for p in module.parameters())


# ------------------------------------------------------------ hand-computed layers

def test_pointwise_conv_params():
    # 4 -> 8 point-wise conv: 4*8 weights + 8 biases
    assert AN._conv(4, 8, 1, 1)[0] == 40


def test_dense_conv_flops():
    # 3^3 conv 2 -> 4 on a 4^3 output: 2 * (4*2*27) * 64
    assert AN._conv(2, 4, 3, 64) == (4 * 2 * 27 + 4, 2 * 4 * 2 * 27 * 64)


def test_depthwise_conv_counts():
    assert AN._conv(6, 6, 3, 10, groups=6) == (6 * 27 + 6, 2 * 6 * 27 * 10)


def test_identity_attention_is_free():
    assert AN.cnn_attention_cost("I", 16, 512, TOY8) == (0, 0)


def test_offset_predictor_is_the_d_minus_l_difference():
    c, v = 8, 64
    d = AN.lka_cost(c, v, (5, 7, 3), 3, deformable=True)
    l = AN.lka_cost(c, v, (5, 7, 3), 3, deformable=False)
    off = AN.offset_predictor_cost(c, 3, v)
    # the deformable stage keeps LKA's depth-wise weights and adds the predictor
    assert d[0] - l[0] == off[0]


def test_resblock_cost_matches_module():
    from lhunet.blocks import ResBlock
    for c_in, c_out in ((4, 4), (4, 8), (3, 9)):
        assert AN.resblock_cost(c_in, c_out, 1)[0] == n_params(ResBlock(c_in, c_out))


# ------------------------------------------------------------ whole network vs built modules

def test_toy8_params_match_built_net():
    rep = AN.analyze(TOY8)
    net = N.build(TOY8)
    assert rep.total_params == N.count_parameters(net)
    for name, child in net.named_children():
        if isinstance(child, torch.nn.ModuleList):
            for i, m in enumerate(child):
                if isinstance(m, torch.nn.Identity):  # placeholder at the deepest level
                    continue
                assert rep.row(f"{name}.{i}").params == n_params(m), f"{name}.{i}"
        else:
            assert rep.row(name).params == n_params(child), name


def random_spec(rng: random.Random) -> A.ArchSpec:
    n_cnn = rng.randint(1, 2)
    n_hyb = rng.randint(1, 3)
    vit = "".join(rng.choice("SC") for _ in range(n_hyb))
    cnn = "".join(rng.choice("DLI") for _ in range(n_hyb))
    heads = rng.choice((1, 2))
    base = rng.choice((2, 3, 4))
    widths = [base]
    for _ in range(n_cnn - 1):
        widths.append(widths[-1] * rng.choice((1, 2)))
    for _ in range(n_hyb):
        widths.append(heads * rng.randint(1, 4))
    n = n_cnn + n_hyb
    side = rng.choice((8, 16))
    down = tuple(rng.choice(((2, 2, 2), (2, 2, 1), (1, 1, 1))) for _ in range(n))
    return A.ArchSpec(
        in_channels=rng.randint(1, 3), out_channels=rng.randint(2, 3),
        patch_size=(side, side, rng.choice((side, side // 2))),
        stage_widths=tuple(widths), downsample=down, n_cnn_stages=n_cnn,
        schedule=A.parse_schedule(f"{vit}-{cnn}"),
        kv_projection_len=rng.randint(1, 4), n_heads=heads,
        lka_kernels=(3, rng.choice((3, 5)), rng.choice((1, 2))), deform_kernel=3,
        upsample=rng.choice(("transposed", "trilinear")),
    )


def valid_random_specs(count, seed=0):
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        s = random_spec(rng)
        if not A.validate(s):
            out.append(s)
    return out


RANDOM_SPECS = valid_random_specs(50)


@pytest.mark.parametrize("spec", RANDOM_SPECS, ids=lambda s: s.schedule.render())
def test_random_spec_params_exact(spec):
    assert AN.analyze(spec).total_params == N.count_parameters(N.build(spec))


@pytest.mark.parametrize("spec", RANDOM_SPECS[:12], ids=lambda s: s.schedule.render())
def test_random_spec_flops_match_instrumented_forward(spec):
    net = N.build(spec).eval()
    x = torch.randn(1, spec.in_channels, *spec.patch_size)
    with torch.no_grad(), P.FlopCounter() as fc:
        net(x)
    assert fc.total == AN.analyze(spec).total_flops


def test_toy8_flops_match_instrumented_forward():
    net = N.build(TOY8).eval()
    with torch.no_grad(), P.FlopCounter() as fc:
        net(torch.randn(1, 2, 32, 32, 32))
    assert fc.total == AN.analyze(TOY8).total_flops


def test_batch_scales_flops_not_params():
    one, two = AN.analyze(TOY8), AN.analyze(TOY8, batch=2)
    assert two.total_flops == 2 * one.total_flops
    assert two.total_params == one.total_params


def test_doubling_patch_scales_conv_flops_by_eight():
    spec = TOY8.with_schedule("CC-DD")
    small, big = AN.analyze(spec), AN.analyze(spec, patch=(64, 64, 64))
    assert big.total_params == small.total_params
    for a, b in zip(small.rows, big.rows):
        if a.layer.startswith(("stem", "head", "reduce", "down", "up")):
            assert b.flops == 8 * a.flops, a.layer


def test_other_patch_refused_with_spatial_attention():
    with pytest.raises(A.ConfigError):
        AN.analyze(TOY8, patch=(64, 64, 64))
    with pytest.raises(A.ConfigError):
        AN.analyze(TOY8.with_schedule("CC-DD"), patch=(30, 30, 30))


def test_invalid_spec_raises():
    with pytest.raises(A.ConfigError):
        AN.analyze(dataclasses.replace(TOY8, n_heads=5))


# ------------------------------------------------------------ comparisons

def test_compare_orders_descending():
    specs = [BRATS.with_schedule(s) for s in ("SC-DD", "CCC-DDD", "SSC-DDD")]
    table = AN.compare(specs)
    assert [r["label"] for r in table] == ["SSC-DDD", "CCC-DDD", "SC-DD"]
    flops = AN.compare(specs, column="flops")
    assert all(a["flops"] >= b["flops"] for a, b in zip(flops, flops[1:]))
    with pytest.raises(ValueError):
        AN.compare(specs, column="speed")


def test_compare_single_row():
    table = AN.compare([TOY8])
    assert len(table) == 1 and table[0]["params"] == AN.analyze(TOY8).total_params


def test_cnn_attention_ordering():
    p = {s: AN.analyze(BRATS.with_schedule(s)).total_params for s in ("SSC-III", "SSC-LLL", "SSC-DDD")}
    assert p["SSC-III"] < p["SSC-LLL"] < p["SSC-DDD"]


# ------------------------------------------------------------ rendering

def test_csv_columns_and_totals():
    rep = AN.analyze(TOY8)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == ["layer", "stage", "params", "flops", "out_shape"]
    assert sum(int(r["params"]) for r in rows) == rep.total_params
    assert rows[0]["out_shape"] == "1x9x32x32x32"


def test_json_round_trip():
    rep = AN.analyze(TOY8)
    d = json.loads(rep.render("json"))
    assert d["total_params"] == rep.total_params and d["total_flops"] == rep.total_flops
    assert len(d["rows"]) == len(rep.rows)


def test_text_has_totals():
    text = AN.analyze(TOY8).render("text")
    assert "total params" in text and "total FLOPs" in text


def test_by_stage_sums():
    rep = AN.analyze(BRATS)
    stages = rep.by_stage()
    assert sum(p for p, _ in stages.values()) == rep.total_params
    assert sum(f for _, f in stages.values()) == rep.total_flops
    assert "encoder.4" in stages and "decoder.full" in stages


def test_count_params_zeroes_flops():
    rep = AN.count_params(TOY8)
    assert rep.total_flops == 0 and rep.total_params == AN.analyze(TOY8).total_params


def test_render_table_formats():
    table = AN.compare([TOY8, TOY8.with_schedule("CC-DD")])
    assert AN.render_table(table, "csv").splitlines()[0] == "label,params,flops"
    assert json.loads(AN.render_table(table, "json")) == table
    assert "M" in AN.render_table(table)


def test_brats_runtime_is_shape_algebra():
    import time
    t = time.perf_counter()
    AN.analyze(BRATS)
    assert time.perf_counter() - t < 5
    assert math.isclose(AN.analyze(BRATS).total_params, 9_707_125)
