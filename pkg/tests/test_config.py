import pytest
from hypothesis import given, settings, strategies as st

from cnpoison.harness import config as hc
from cnpoison.harness.config import ConfigError, RunConfig


def test_defaults_validate():
    RunConfig().validate()


def test_training_defaults():
    cfg = RunConfig()
    assert (cfg.train.epochs, cfg.train.lr, cfg.train.weight_decay) == (100, 1e-3, 1e-2)
    assert (cfg.train.lr_schedule, cfg.train.lr_min) == ("cosine", 1e-4)
    assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999)
    assert cfg.train.batch_size == 16
    assert cfg.poison.fraction == 0.05
    assert (cfg.eval.tau_c, cfg.eval.tau_s) == (0.7, 0.7)


def test_empty_file_is_default(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# nothing here\n\n")
    assert hc.load_config(p).to_text() == RunConfig().to_text()


def test_text_round_trip():
    cfg = RunConfig()
    cfg.set("poison.fraction", "0.01")
    cfg.set("train.early_stop", "false")
    cfg.set("run.out_dir", "runs/x")
    assert hc.parse_config(cfg.to_text()).to_text() == cfg.to_text()


def test_overrides_apply_after_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("corpus.seed = 3  # inline comment\nsampler.steps = 20\n")
    cfg = hc.load_config(p, ["corpus.seed=7"])
    assert cfg.corpus.seed == 7 and cfg.sampler.steps == 20


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as e:
        RunConfig().set("poison.fracton", "0.1")
    assert "poison.fracton" in str(e.value) and "poison.fraction" in str(e.value)


@pytest.mark.parametrize("key,raw", [("corpus.n", "ten"), ("train.lr", "fast"), ("train.early_stop", "maybe")])
def test_unparseable_value_rejected(key, raw):
    with pytest.raises(ConfigError, match=key):
        RunConfig().set(key, raw)


def test_line_without_equals_names_location():
    with pytest.raises(ConfigError, match="cfg:2"):
        hc.parse_config("corpus.n = 10\njunk\n", "cfg")


def test_missing_config_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        hc.load_config(tmp_path / "absent.cfg")


def test_malformed_override_rejected():
    with pytest.raises(ConfigError, match="key=value"):
        hc.load_config(None, ["corpus.seed"])


@pytest.mark.parametrize("key,value", [
    ("poison.fraction", 1.0), ("trigger.strength", 1.5), ("sampler.steps", 0), ("sampler.steps", 251),
    ("sampler.kind", "euler"), ("trigger.mode", "latent"), ("eval.tau_c", 1.0), ("corpus.size", 12),
    ("model.widths", "8,8"), ("sweep.axis", "lr"), ("train.corpus", "mixed"),
    ("train.lr_schedule", "step"), ("train.lr_min", "0.1"),
])
def test_invalid_values_fail_validation(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[1] if key != "corpus.size" else "size"):
        RunConfig().with_value(key, value).validate()


def test_referenced_paths_must_exist(tmp_path):
    cfg = RunConfig().with_value("poison.target", str(tmp_path / "nope.png"))
    with pytest.raises(ConfigError, match="file not found"):
        cfg.validate()
    cfg.validate(check_paths=False)


def test_with_value_leaves_original_untouched():
    a = RunConfig()
    b = a.with_value("sampler.scale", 0.3)
    assert a.sampler.scale == 1.0 and b.sampler.scale == 0.3
    assert b.diff(a) == ["sampler.scale"]
    assert a.diff(a) == []


def test_digest_scoped_to_sections():
    a = RunConfig()
    b = a.with_value("sampler.steps", 10)
    assert a.digest() != b.digest()
    assert a.digest(("corpus", "edge")) == b.digest(("corpus", "edge"))
    assert len(a.digest()) == 64


def test_out_dir_follows_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(hc.OUT_ENV, str(tmp_path))
    assert RunConfig().out_dir == tmp_path / "runs" / "default"
    assert RunConfig().with_value("run.out_dir", "/abs/here").out_dir.as_posix() == "/abs/here"


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(hc.valid_keys()), st.data())
def test_every_key_round_trips_its_own_rendering(key, data):
    cfg = RunConfig()
    value = cfg.get(key)
    if isinstance(value, bool):
        new = data.draw(st.booleans())
    elif isinstance(value, int):
        new = data.draw(st.integers(0, 10_000))
    elif isinstance(value, float):
        new = data.draw(st.floats(0, 1, allow_nan=False))
    else:
        new = data.draw(st.text("abc,._-", max_size=12)).strip()
    cfg.set(key, new)
    assert hc.parse_config(cfg.to_text()).get(key) == new
