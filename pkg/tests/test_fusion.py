import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featsketch.errors import ConfigError, DimensionError
from featsketch.fusion import (
    AblationFlags,
    FusionLevel,
    build_generator,
    excluded_features,
    fuse_step,
    generate_sketch,
    spatial_attention,
    upsample2x,
)
from featsketch.generator_tap import FeaturePyramid, default_schedule, hijack_features, toy_schedule


def _level(seed=0, in_ch=16, reduced=4, fused=8, prev=16, res=8, dtype=torch.float64):
    torch.manual_seed(seed)
    return FusionLevel(res, in_ch, in_ch, reduced, fused, prev).to(dtype)


def _inputs(seed=0, in_ch=16, prev=16, res=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(in_ch, res, res, generator=g, dtype=dtype),
        torch.randn(in_ch, res, res, generator=g, dtype=dtype),
        torch.randn(prev, res // 2, res // 2, generator=g, dtype=dtype),
    )


def _random_pyramid(schedule, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return FeaturePyramid([torch.randn(c, r, r, generator=g, dtype=dtype) for r, c in schedule.entries], schedule)


def test_zero_attention_head_gives_half():
    level = _level()
    with torch.no_grad():
        level.attention_head.weight.zero_()
        level.attention_head.bias.zero_()
    _, _, fp = _inputs()
    m = spatial_attention(upsample2x(fp[None]), level)
    assert tuple(m.shape) == (1, 1, 8, 8)
    assert torch.all(m == 0.5)


def test_attention_deterministic():
    level = _level()
    _, _, fp = _inputs()
    up = upsample2x(fp[None])
    assert torch.equal(spatial_attention(up, level), spatial_attention(up, level))


def test_attention_resolution_mismatch():
    level = _level()
    with pytest.raises(DimensionError):
        spatial_attention(torch.zeros(1, 16, 4, 4, dtype=torch.float64), level)


def test_zero_gate_ignores_f_i():
    level = _level()
    f_i, f_prev, fp = _inputs()
    zero = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    base = fuse_step(f_i, f_prev, fp, level, gate=zero)
    for delta in (0.1, -0.1):
        assert torch.equal(fuse_step(f_i + delta, f_prev, fp, level, gate=zero), base)
        assert torch.equal(fuse_step(f_i, f_prev + delta, fp, level, gate=zero), base)


def test_unit_gate_equals_attention_disabled():
    level = _level()
    f_i, f_prev, fp = _inputs()
    one = torch.ones(1, 1, 8, 8, dtype=torch.float64)
    gated = fuse_step(f_i, f_prev, fp, level, gate=one)
    plain = fuse_step(f_i, f_prev, fp, level, AblationFlags(use_attention=False))
    assert torch.equal(gated, plain)


def test_toy_level_shape():
    level = _level(reduced=4, fused=8)
    f_i, f_prev, fp = _inputs()
    out = fuse_step(f_i, f_prev, fp, level)
    assert tuple(out.shape) == (8, 8, 8)
    assert level.merge.in_channels == 2 * 4 + 16


def test_level_zero_has_no_attention():
    torch.manual_seed(0)
    level = FusionLevel(4, 8, 8, 4, 8, 0)
    assert level.attention_head is None
    assert level.merge.in_channels == 8
    out = fuse_step(torch.randn(8, 4, 4), torch.randn(8, 4, 4), None, level)
    assert tuple(out.shape) == (8, 4, 4)
    with pytest.raises(DimensionError):
        fuse_step(torch.randn(8, 4, 4), torch.randn(8, 4, 4), torch.randn(8, 2, 2), level)


def test_fuse_step_rejects_bad_shapes():
    level = _level()
    f_i, f_prev, fp = _inputs()
    with pytest.raises(DimensionError):
        fuse_step(f_i[:, :4, :4], f_prev, fp, level)
    with pytest.raises(DimensionError):
        fuse_step(f_i, f_prev, fp[:, :2, :2], level)
    with pytest.raises(DimensionError):
        fuse_step(f_i, f_prev, None, level)


def test_toy_sketch_contract(handle, sketch_net, latent):
    _, pyr = hijack_features(latent, handle)
    with torch.no_grad():
        sketch = generate_sketch(pyr, sketch_net)
    assert tuple(sketch.shape) == (3, 64, 64)
    assert sketch.min() >= 0 and sketch.max() <= 1


def test_attention_off_equals_unit_gates(handle, latent, schedule):
    _, pyr = hijack_features(latent, handle)
    on = build_generator(schedule, AblationFlags(), seed=3)
    off = build_generator(schedule, AblationFlags(use_attention=False), seed=3)
    off.load_state_dict(on.state_dict())
    gates = {k: torch.ones(1, 1, lvl.resolution, lvl.resolution) for k, lvl in enumerate(on.levels) if k > 0}
    with torch.no_grad():
        assert torch.equal(generate_sketch(pyr, off), generate_sketch(pyr, on, gates))


def test_full_scale_sketch_resolution():
    s = default_schedule()
    net = build_generator(s, seed=0)
    with torch.no_grad():
        sketch = generate_sketch(_random_pyramid(s), net)
    assert tuple(sketch.shape) == (3, 1024, 1024)


def test_level_counts():
    assert len(build_generator(default_schedule()).levels) == 9
    assert len(build_generator(toy_schedule()).levels) == 5


def test_same_seed_same_parameters(schedule):
    a, b = build_generator(schedule, seed=5), build_generator(schedule, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = build_generator(schedule, seed=6)
    assert any(not torch.equal(x, y) for x, y in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_does_not_touch_global_rng(schedule):
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    build_generator(schedule, seed=99)
    assert torch.equal(torch.rand(3), expected)


def test_channel_profile():
    net = build_generator(default_schedule())
    assert [lvl.fused_channels for lvl in net.levels] == [256, 128, 64, 32, 32, 32, 32, 32, 32]
    assert all(lvl.reduced_channels == 32 for lvl in net.levels)
    for k, lvl in enumerate(net.levels):
        prev = net.levels[k - 1].fused_channels if k else 0
        assert lvl.merge.in_channels == 2 * lvl.reduced_channels + prev


def test_excluded_feature_sets():
    assert excluded_features(18, "all") == frozenset()
    assert excluded_features(18, "first_half") == frozenset(range(9, 18))
    assert excluded_features(18, "drop_last") == frozenset({17})
    # features 5-14 counted from one
    assert excluded_features(18, "drop_middle_ten") == frozenset(range(4, 14))
    with pytest.raises(ConfigError):
        AblationFlags(feature_subset="bogus")


@pytest.mark.parametrize("subset", ["first_half", "drop_last", "drop_middle_ten"])
def test_excluded_features_have_no_influence(schedule, subset):
    net = build_generator(schedule, AblationFlags(feature_subset=subset), seed=2)
    pyr = _random_pyramid(schedule, seed=1)
    feats = list(pyr.features)
    for j in net.excluded:
        feats[j] = feats[j] + 1.0
    with torch.no_grad():
        a = generate_sketch(pyr, net)
        b = generate_sketch(FeaturePyramid(feats, schedule), net)
    assert torch.equal(a, b)


def test_without_f_prev(schedule):
    net = build_generator(schedule, AblationFlags(use_f_prev_in_pair=False), seed=0)
    assert all(lvl.reduce_b is None for lvl in net.levels)
    pyr = _random_pyramid(schedule)
    feats = list(pyr.features)
    for j_prev, _ in schedule.pairs():
        feats[j_prev] = torch.zeros_like(feats[j_prev])
    with torch.no_grad():
        assert torch.equal(generate_sketch(pyr, net), generate_sketch(FeaturePyramid(feats, schedule), net))


def test_generate_sketch_schedule_mismatch(sketch_net):
    with pytest.raises(ConfigError):
        generate_sketch(_random_pyramid(default_schedule()), sketch_net)
    s = toy_schedule()
    feats = list(_random_pyramid(s).features)
    feats[2] = feats[2][:, :4]
    with pytest.raises(ConfigError):
        generate_sketch(FeaturePyramid(feats, s), sketch_net)


def test_batched_matches_unbatched(schedule, sketch_net):
    pyrs = [_random_pyramid(schedule, seed=i) for i in range(2)]
    batched = FeaturePyramid([torch.stack(fs) for fs in zip(*(p.features for p in pyrs))], schedule)
    with torch.no_grad():
        out = generate_sketch(batched, sketch_net)
        singles = [generate_sketch(p, sketch_net) for p in pyrs]
    for b in range(2):
        torch.testing.assert_close(out[b], singles[b], rtol=1e-5, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_attention_range_property(seed, scale):
    level = _level(seed)
    _, _, fp = _inputs(seed)
    m = spatial_attention(upsample2x(scale * fp[None]), level)
    assert m.min() >= 0 and m.max() <= 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), delta=st.floats(-10.0, 10.0))
def test_gate_nullity_property(seed, delta):
    level = _level(seed)
    f_i, f_prev, fp = _inputs(seed)
    zero = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    base = fuse_step(f_i, f_prev, fp, level, gate=zero)
    moved = fuse_step(f_i + delta, f_prev - delta, fp, level, gate=zero)
    assert (moved - base).abs().max() <= 1e-6


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gate_identity_property(seed):
    level = _level(seed)
    f_i, f_prev, fp = _inputs(seed)
    one = torch.ones(1, 1, 8, 8, dtype=torch.float64)
    assert torch.equal(
        fuse_step(f_i, f_prev, fp, level, gate=one),
        fuse_step(f_i, f_prev, fp, level, AblationFlags(use_attention=False)),
    )


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_shape_law_property(schedule, seed):
    net = build_generator(schedule, seed=seed % 1000)
    pyr = _random_pyramid(schedule, seed)
    x = [f.unsqueeze(0) for f in pyr.features]
    fused, resolutions = None, []
    with torch.no_grad():
        for k, (lvl, (j_prev, j_i)) in enumerate(zip(net.levels, schedule.pairs())):
            fused = fuse_step(x[j_i], x[j_prev], fused, lvl)
            resolutions.append(fused.shape[-1])
        sketch = net(x)
    assert all(b == 2 * a for a, b in zip(resolutions, resolutions[1:]))
    assert sketch.shape[-1] == schedule.output_resolution


def test_parameter_gradient_matches_finite_differences(schedule):
    """Central differences of a scalar probe of the sketch, double precision."""
    net = build_generator(schedule, seed=4, reduced_cap=8, fused_max=16, fused_min=8, dtype=torch.float64)
    pyr = _random_pyramid(schedule, seed=4, dtype=torch.float64)
    probe = torch.randn(3, 64, 64, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

    def objective():
        return (generate_sketch(pyr, net) * probe).sum()

    objective().backward()
    params = dict(net.named_parameters())
    g = torch.Generator().manual_seed(6)
    names = list(params)
    eps = 1e-6
    for _ in range(8):
        name = names[torch.randint(len(names), (1,), generator=g).item()]
        p = params[name]
        idx = torch.randint(p.numel(), (1,), generator=g).item()
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            up = objective().item()
            flat[idx] = orig - eps
            down = objective().item()
            flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = p.grad.view(-1)[idx].item()
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-6), (name, numeric, analytic)
