import pytest
import torch
import torch.nn as nn

from mfsod.errors import CheckpointError, ConfigError, InputError
from mfsod.imff import IMFF
from mfsod.model import (
    FUSION_MODES,
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    parameter_breakdown,
    save_checkpoint,
)
from mfsod.training import deep_supervision_loss


def _imffs(model):
    return [m for m in model.modules() if isinstance(m, IMFF)]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(fusion_mode="level6")
    with pytest.raises(ConfigError):
        ModelConfig(projection_kernel=2)
    cfg = ModelConfig(fusion_mode="level4", seed=5, projection_kernel=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_same_seed_bit_identical_initialization(narrow_config):
    a = build_model(ModelConfig(narrow_config, seed=11))
    b = build_model(ModelConfig(narrow_config, seed=11))
    c = build_model(ModelConfig(narrow_config, seed=12))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_structure_per_fusion_mode(narrow_config):
    m3 = build_model(ModelConfig(narrow_config, "level3"))
    imffs = _imffs(m3)
    assert len(imffs) == 1
    assert imffs[0].channels == narrow_config.channels(3)
    assert sorted(m3.rgb_extractor.levels) == [1, 2, 3]
    assert sorted(m3.shared_extractor.levels) == [4, 5]

    concat = build_model(ModelConfig(narrow_config, "input_concat"))
    assert not _imffs(concat)
    assert not any("imff" in name for name, _ in concat.named_parameters())
    assert concat.rgbd_extractor.in_channels == 4

    m5 = build_model(ModelConfig(narrow_config, "level5"))
    assert m5.shared_extractor is None
    assert _imffs(m5)[0].channels == narrow_config.channels(5)


@torch.no_grad()
def test_forward_shapes_at_224(default_model):
    out = default_model(torch.randn(1, 3, 224, 224), torch.randn(1, 1, 224, 224))
    assert out.final.shape == (1, 1, 224, 224)
    assert [m.shape[-1] for m in out.forward_maps] == [56, 28, 14, 7]
    assert [m.shape[-1] for m in out.backward_maps] == [56, 28, 14, 7]
    assert len(out) == 9
    assert out.final.min() >= 0 and out.final.max() <= 1


@torch.no_grad()
@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_fusion_mode_runs(narrow_config, mode):
    model = build_model(ModelConfig(narrow_config, mode)).eval()
    out = model(torch.randn(1, 3, 64, 96), torch.randn(1, 1, 64, 96))
    assert out.final.shape == (1, 1, 64, 96)
    assert [tuple(m.shape[-2:]) for m in out.forward_maps] == [(16, 24), (8, 12), (4, 6), (2, 3)]


@torch.no_grad()
def test_batch_independence_and_constant_inputs(narrow_config):
    model = build_model(ModelConfig(narrow_config)).eval()
    rgb, depth = torch.randn(1, 3, 64, 64), torch.rand(1, 1, 64, 64)
    out = model(rgb.repeat(2, 1, 1, 1), depth.repeat(2, 1, 1, 1))
    torch.testing.assert_close(out.final[0], out.final[1], rtol=0, atol=1e-6)
    single = model(rgb, depth)
    torch.testing.assert_close(out.final[:1], single.final, rtol=1e-5, atol=1e-6)

    for value in (0.0, 1.0, -3.0):
        out = model(torch.full((1, 3, 64, 64), value), torch.full((1, 1, 64, 64), value))
        assert all(torch.isfinite(t).all() for t in [out.final, *out.intermediate_maps])


def test_forward_input_errors(narrow_config):
    model = build_model(ModelConfig(narrow_config))
    with pytest.raises(InputError):
        model(torch.randn(1, 3, 60, 64), torch.randn(1, 1, 60, 64))
    with pytest.raises(InputError):
        model(torch.randn(1, 3, 64, 64), torch.randn(1, 3, 64, 64))
    with pytest.raises(InputError):
        model(torch.randn(1, 3, 64, 64), torch.randn(2, 1, 64, 64))
    with pytest.raises(InputError):
        model(torch.randn(3, 64, 64), torch.randn(1, 64, 64))


def test_parameter_count_band_and_ordering():
    counts = {mode: count_parameters(build_model(ModelConfig(fusion_mode=mode))) for mode in FUSION_MODES}
    assert 3.4e6 <= counts["level3"] <= 4.4e6
    order = [counts[m] for m in FUSION_MODES]
    assert order[0] <= order[1]
    assert all(a < b for a, b in zip(order[1:], order[2:]))
    assert counts["level5"] - counts["level3"] > counts["level2"] - counts["level1"]


def test_count_parameters_arithmetic():
    assert count_parameters(nn.Conv2d(64, 1, 1)) == 65
    frozen = nn.Conv2d(64, 1, 1)
    frozen.bias.requires_grad_(False)
    assert count_parameters(frozen) == 64


def test_parameter_breakdown_sums_to_total(narrow_config):
    model = build_model(ModelConfig(narrow_config))
    bd = parameter_breakdown(model)
    assert sum(v for k, v in bd.items() if k != "total") == bd["total"] == count_parameters(model)
    assert set(bd) == {"rgb_extractor", "depth_extractor", "imff", "shared_extractor", "decoder", "total"}


@pytest.mark.parametrize("mode", ["input_concat", "level3", "level5"])
def test_every_parameter_receives_a_gradient(narrow_config, mode):
    model = build_model(ModelConfig(narrow_config, mode)).train()
    g = torch.Generator().manual_seed(0)
    rgb, depth = torch.randn(2, 3, 64, 64, generator=g), torch.rand(2, 1, 64, 64, generator=g)
    gt = (torch.rand(2, 1, 64, 64, generator=g) > 0.5).float()
    deep_supervision_loss(model(rgb, depth), gt).backward()
    missing = [n for n, p in model.named_parameters() if p.requires_grad and p.grad is None]
    assert not missing


def test_checkpoint_round_trip(tmp_path, narrow_config):
    model = build_model(ModelConfig(narrow_config, "level2", seed=4)).eval()
    x, d = torch.randn(1, 3, 64, 64), torch.randn(1, 1, 64, 64)
    path = save_checkpoint(model, tmp_path / "ck.pt", extra={"note": "x"})
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    sa, sb = model.state_dict(), loaded.state_dict()
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    with torch.no_grad():
        assert torch.equal(model(x, d).final, loaded(x, d).final)


def test_checkpoint_errors(tmp_path, narrow_config):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")

    path = save_checkpoint(build_model(ModelConfig(narrow_config)), tmp_path / "ck.pt")
    payload = torch.load(path, weights_only=True)
    payload["state_dict"].pop(next(iter(payload["state_dict"])))
    torch.save(payload, tmp_path / "trunc.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.pt")
