import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartpfl.config import ConfigError, ExperimentConfig, default_config_text


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_ini(cfg.to_ini())
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_default_text_parses_to_defaults():
    assert ExperimentConfig.from_ini(default_config_text()) == ExperimentConfig()


def test_override_changes_exactly_one_field():
    base = ExperimentConfig()
    cfg = base.with_overrides(["fl.rounds=7"])
    assert cfg.fl.rounds == 7
    diff = [a for a, b in zip(base.to_ini().splitlines(), cfg.to_ini().splitlines()) if a != b]
    assert diff == ["rounds = 30"]


def test_nested_sections():
    cfg = ExperimentConfig.load(None, ["pgd.epsilon=0.25", "akt.use_clean=false", "hda.num_early=none",
                                       "model.widths=8, 8, 8"])
    assert cfg.fl.akt.pgd.epsilon == 0.25 and cfg.fl.akt.use_clean is False
    assert cfg.fl.hda.num_early is None and cfg.model.widths == (8, 8, 8)


def test_file_load(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("# comment\n[fl]\nrounds = 3\n[data]\nalpha = 0.5\n")
    cfg = ExperimentConfig.load(path, ["fl.rounds=4"])
    assert cfg.fl.rounds == 4 and cfg.data.alpha == 0.5


@pytest.mark.parametrize("items,match", [
    (["nope.x=1"], "unknown section"),
    (["fl.nope=1"], "unknown key fl.nope"),
    (["fl.rounds=three"], "fl.rounds"),
    (["akt.use_clean=maybe"], "akt.use_clean"),
    (["fl.method=magic"], "unknown method"),
    (["rounds=3"], "section.key=value"),
])
def test_bad_overrides(items, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.load(None, items)


def test_unreadable_file(tmp_path):
    (tmp_path / "c.ini").write_text("rounds = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.ini")


def test_hash_ignores_run_section():
    a = ExperimentConfig()
    b = a.with_overrides(["run.out_dir=/elsewhere", "run.workers=4"])
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.with_overrides(["fl.seed=1"]).config_hash()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100, allow_nan=False), st.booleans(),
       st.sampled_from(["epoch_snapshot", "per_batch"]), st.lists(st.integers(1, 64), min_size=2, max_size=5))
def test_round_trip_property(seed, alpha, flag, mode, widths):
    cfg = ExperimentConfig.load(None, [f"fl.seed={seed}", f"data.alpha={alpha!r}", f"akt.use_symmetric_kl={flag}",
                                       f"hda.prototype_mode={mode}", "model.widths=" + ",".join(map(str, widths))])
    assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg
