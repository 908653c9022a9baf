import pytest
from hypothesis import given, strategies as st

from uvdisp import config as cfgmod
from uvdisp import registration as reg


def test_empty_config_gives_published_defaults():
    cfg = cfgmod.parse_config("")
    r, p = cfg.register, cfg.partial
    assert (r.stage1.chamfer, r.stage1.edge, r.stage1.laplacian) == (2e3, 2e5, 1e4)
    assert (r.stage2.chamfer, r.stage2.edge, r.stage2.laplacian) == (2e4, 2e4, 1e4)
    assert (r.stage1.lr, r.stage2.lr) == (3e-2, 3e-4)
    assert r.stage1.prune_threshold == r.stage2.prune_threshold == 1.0
    assert (p.stage1.edge, p.stage1.laplacian, p.stage1.prune_threshold) == (8e5, 1e5, 10.0)
    assert p.stage2.prune_threshold == 0.1
    assert (p.proximity, p.proximity_sparse, p.expansion) == (0.1, 0.3, 1.5)
    assert (cfg.uv.resolution, cfg.uv.blend_radius) == (256, 10.0)
    assert cfg.model.psi == 0.7 and cfg.model.face_weight == 10 / 256
    assert cfg.animate.smoothing.as_dict()["lips"] == 3
    assert cfg.animate.smoothing.as_dict()["face_skin"] == 5


def test_stage_settings_match_registration_defaults():
    cfg = cfgmod.PipelineConfig()
    s1 = cfg.register.stage1.to_stage_config("vector")
    s2 = cfg.register.stage2.to_stage_config("normal")
    assert s1.weights == reg.default_stage1().weights and s1.lr == reg.default_stage1().lr
    assert s2.weights == reg.default_stage2().weights and set(s2.free_regions) == set(reg.default_stage2().free_regions)


def test_dotted_keys_and_sections():
    text = """
    # comment
    seed = 7
    register.stage1.lr = 0.01
    [register.stage2]
    steps = 20
    free_regions = scalp, lips
    [uv]
    resolution = 64   # trailing comment
    [model]
    iterative = yes
    """
    cfg = cfgmod.parse_config(text)
    assert cfg.seed == 7
    assert cfg.register.stage1.lr == 0.01
    assert cfg.register.stage2.steps == 20
    assert cfg.register.stage2.free_regions == ("scalp", "lips")
    assert cfg.uv.resolution == 64
    assert cfg.model.iterative is True


@pytest.mark.parametrize("text, match", [
    ("register.stage1.lrr = 1", "unknown"),
    ("[uv]\nregister.stage1.lr = 1", "unknown"),
    ("uv = 3", "section"),
    ("uv.resolution = big", "cannot parse"),
    ("model.iterative = maybe", "cannot parse"),
    ("register.stage1.free_regions = scalp, hat", "unknown regions"),
    ("just a line", "expected"),
])
def test_bad_config_lines(text, match):
    with pytest.raises(cfgmod.ConfigError, match=match):
        cfgmod.parse_config(text)


def test_error_reports_line_number():
    with pytest.raises(cfgmod.ConfigError, match="line 3"):
        cfgmod.parse_config("seed = 1\n\nnope = 2\n")


def test_dump_parse_roundtrip():
    cfg = cfgmod.parse_config("register.stage2.lr = 1e-5\nworkers = 3\nmodel.iterative = true\n")
    assert cfgmod.parse_config(cfgmod.dump_config(cfg)) == cfg
    assert cfgmod.parse_config(cfgmod.dump_config(cfgmod.PipelineConfig())) == cfgmod.PipelineConfig()


@given(st.floats(1e-9, 1e9, allow_nan=False), st.integers(1, 10_000))
def test_roundtrip_property(lr, steps):
    cfg = cfgmod.PipelineConfig()
    cfg.register.stage1.lr = lr
    cfg.partial.stage2.steps = steps
    assert cfgmod.parse_config(cfgmod.dump_config(cfg)) == cfg


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[metrics]\ngrid = 32\n")
    assert cfgmod.load_config(p).metrics.grid == 32
    assert cfgmod.load_config(None) == cfgmod.PipelineConfig()
