import pytest

from wiser.config import RunConfig, parse_config, parse_config_text, serialize
from wiser.errors import ConfigError


def test_defaults():
    cfg = parse_config_text("")
    assert cfg.weaksup.t_plus == 0.7 and cfg.weaksup.t_minus == 0.3
    assert cfg.subset.k == 20 and cfg.subset.budget == 100.0
    assert cfg.train.critic_steps == 5 and cfg.train.gp_weight == 10.0
    assert cfg.run.folds == 5 and cfg.run.compare_no_ws


def test_values_parse_and_comments(tmp_path):
    text = ("# header\n"
            "run.seed = 7   # trailing\n"
            "run.drugs = a, b\n"
            "run.ablate = no-cns\n"
            "train.decoder_hidden = 8, 16\n"
            "grid.thresholds = 0.7/0.3, 0.6/0.4\n"
            "grid.budget = 20, 50\n"
            "run.output_dir = out\n")
    cfg = parse_config_text(text, base_dir=tmp_path)
    assert cfg.run.seed == 7 and cfg.run.drugs == ("a", "b") and cfg.run.ablate == ("no-cns",)
    assert cfg.train.decoder_hidden == (8, 16)
    assert cfg.grid.thresholds == ((0.7, 0.3), (0.6, 0.4))
    assert cfg.run.output_dir == str((tmp_path / "out").resolve())
    assert len(cfg.filled_grid().cells()) == 4


def test_threshold_order_rejected_with_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("weaksup.t_plus = 0.3\nweaksup.t_minus = 0.5\n")
    assert exc.value.key == "weaksup.t_minus" and exc.value.line == 2


@pytest.mark.parametrize("text,key,line", [
    ("run.seed = 1\nrun.sede = 2\n", "run.sede", 2),
    ("bogus.key = 1\n", "bogus.key", 1),
    ("train.seed = 3\n", "train.seed", 1),  # sub-seeds derive from run.seed
    ("run.seed = 1\nrun.seed = 2\n", "run.seed", 2),
    ("run.folds = five\n", "run.folds", 1),
    ("subset.budget = 0\n", "subset.budget", 1),
    ("run.ablate = no-foo\n", "run.ablate", 1),
])
def test_bad_keys_and_values(text, key, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.key == key and exc.value.line == line
    assert key in str(exc.value)


def test_missing_equals():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("\nrun.seed 4\n")
    assert exc.value.line == 2


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/wiser.conf")


def test_round_trip(tmp_path):
    text = ("run.seed = 3\nrun.drugs = x\ntrain.inv_temp = 0.1\ngrid.thresholds = 0.7/0.3\n"
            "grid.budget = 10.0, 100.0\nweaksup.aggregator = median\nrun.compare_no_ws = false\n")
    cfg = parse_config_text(text, base_dir=tmp_path)
    again = parse_config_text(serialize(cfg), base_dir=tmp_path)
    assert again == cfg
    assert parse_config_text(serialize(RunConfig()), base_dir=".") == parse_config_text("", base_dir=".")


def test_with_overrides():
    cfg = parse_config_text("")
    new = cfg.with_overrides(budget=40.0, t_plus=0.8, t_minus=0.2, seed=5)
    assert new.subset.budget == 40.0 and new.weaksup.t_plus == 0.8 and new.run.seed == 5
    assert cfg.subset.budget == 100.0
    with pytest.raises(ConfigError):
        cfg.with_overrides(budget=150.0)
    with pytest.raises(ConfigError):
        cfg.with_overrides(nonsense=1)


def test_benchmark_config_parses():
    from pathlib import Path
    cfg = parse_config(Path(__file__).parent.parent / "configs" / "synthetic_benchmark.conf")
    assert (cfg.synth.latent_dim, cfg.synth.genes, cfg.synth.n_cell, cfg.synth.n_patient,
            cfg.synth.n_drugs) == (8, 100, 300, 1500, 4)
