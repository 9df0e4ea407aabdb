"""
Test the command-line front-end.

Validates configuration parsing and precedence, exit codes per error
family, report helpers, and a miniature gen-suite -> gen-data -> train ->
report pipeline in a temporary output root.
"""
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import pandas as pd
import pytest

from app.core.config import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    RESOLVED_CONFIG_NAME,
    apply_overrides,
    dump_run_config,
    load_run_config,
    parse_run_config,
)
from app.main import exit_code_for, main
from app.models.schemas import RunConfig
from app.services.experiment_service import checkpoints_to_fraction, default_held_out, scaled_m_values, variant_name
from app.services.report_service import markdown_table, missing_seed_cells, standard_error
from app.utils.run_storage import MissingArtifact
from xemb_ml.errors import ConfigError, CorruptDataset, LayoutError, NumericalError

MINI_CONFIG = """
[run]
name = "mini"
seeds = [0]

[suite.env]
horizon = 100

[data]
datasets = ["expert-forward"]
steps_per_robot = 100

[train]
methods = ["iql"]
updates = 2
per_robot_batch = 4
eval_episodes = 1

[model]
latent_dim = 4
encoder_widths = [8]
core_widths = [16]
value_widths = [16]
head_widths = [8]
descriptor_latent_dim = 4
action_latent_dim = 4
action_encoder_widths = [8]
"""


@pytest.fixture()
def mini_config(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(MINI_CONFIG)
    return path


def test_default_config_round_trip():
    """A dumped default config parses back to the same model."""
    config = RunConfig()
    assert parse_run_config(tomllib.loads(dump_run_config(config))) == config


def test_file_values_are_read(mini_config):
    """Sections of the TOML file land in the matching config fields."""
    config = load_run_config(mini_config)
    assert config.run.name == "mini"
    assert config.suite.env.horizon == 100
    assert config.train.updates == 2
    assert config.model.latent_dim == 4
    assert config.train_datasets == ["expert-forward"]


def test_invalid_configs_are_config_errors(tmp_path):
    """Unknown methods, unknown keys, bad TOML and missing files all raise ConfigError."""
    for text in ('[train]\nmethods = ["sac"]\n', "[run]\ncolour = 1\n", "[run\nname = 1\n"):
        path = tmp_path / "bad.toml"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_run_config(path)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.toml")


def test_seed_override_targets():
    """--seed replaces the suite seed, the data seed or the training seeds."""
    config = RunConfig()
    assert apply_overrides(config, seed=7, seed_target="suite").suite.seed == 7
    assert apply_overrides(config, seed=7, seed_target="data").data.seed == 7
    assert apply_overrides(config, seed=7, seed_target="run").run.seeds == [7]
    assert apply_overrides(config, seed=None).run.seeds == [0]


def test_flags_take_precedence_over_file(mini_config):
    """Command-line workers and output root override the file."""
    config = apply_overrides(load_run_config(mini_config), out="elsewhere", workers=3)
    assert config.run.out == "elsewhere"
    assert config.run.workers == 3


def test_method_config_applies_method_overrides():
    """Method names expand into trainer settings with the requested seed."""
    config = RunConfig()
    cell = config.method_config("iql+eg-critic", seed=3)
    assert (cell.algorithm, cell.grouping, cell.critic_grouping, cell.seed) == ("iql", "eg", True, 3)
    with pytest.raises(ConfigError):
        config.method_config("sac", seed=0)


def test_variant_names():
    """Mixture fractions must be whole percentages in [0, 1]."""
    assert variant_name("mixture", "forward", 0.7) == "mixture70-forward"
    assert variant_name("expert", "backward") == "expert-backward"
    with pytest.raises(ConfigError):
        variant_name("mixture", "forward", 1.2)
    with pytest.raises(ConfigError):
        variant_name("mixture", "forward", 0.705)


def test_exit_code_mapping(tmp_path):
    """Error families map to exit codes 2, 3 and 4."""
    assert exit_code_for(ConfigError("x")) == EXIT_CONFIG
    assert exit_code_for(CorruptDataset("x")) == EXIT_DATA
    assert exit_code_for(MissingArtifact(tmp_path, "gen-suite")) == EXIT_DATA
    assert exit_code_for(NumericalError("x")) == EXIT_NUMERICAL
    assert exit_code_for(LayoutError("x")) == EXIT_NUMERICAL


def test_cli_rejects_bad_fraction(tmp_path):
    """An out-of-range mixture fraction exits with the config code before any work."""
    code = main(["gen-data", "--variant", "mixture", "--fraction", "1.5", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert not (tmp_path / "data").exists()


def test_cli_unknown_method_in_file(tmp_path):
    """A config naming an unknown method exits with the config code."""
    path = tmp_path / "bad.toml"
    path.write_text('[train]\nmethods = ["sac"]\n')
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_missing_upstream_artifact(tmp_path):
    """Generating data before the suite exits with the data code."""
    assert main(["gen-data", "--dataset", "expert-forward", "--out", str(tmp_path)]) == EXIT_DATA


def test_standard_error_and_tables():
    """SE is the sample SD over sqrt(n); tables render header, rule and rows."""
    assert standard_error([1.0, 2.0, 3.0]) == pytest.approx(1.0 / 3.0**0.5)
    assert standard_error([5.0]) != standard_error([5.0])
    table = markdown_table(["a", "b"], [["1", "2"]])
    assert table.splitlines() == ["| a | b |", "|---|---|", "| 1 | 2 |"]


def test_missing_seed_cells():
    """Cells lacking an expected seed are listed."""
    results = pd.DataFrame(
        {"dataset": ["d", "d", "d"], "method": ["iql", "iql", "bc"], "seed": [0, 1, 0], "mean_return": [1.0, 2.0, 3.0]}
    )
    assert missing_seed_cells(results, [0, 1]) == ["d / bc: missing seeds [1]"]


def test_analysis_helpers(suite):
    """Group-count scaling, held-out defaults and checkpoints-to-90%."""
    assert scaled_m_values([1, 2, 4, 7, 10, 13], 4) == [1, 2, 4]
    assert default_held_out(suite) == ["biped-00", "hexa-00", "quad-00"]
    assert checkpoints_to_fraction([(1, 0.0), (2, 5.0), (3, 9.5), (4, 10.0)]) == 3
    assert checkpoints_to_fraction([]) == 0


def test_miniature_pipeline(tmp_path, mini_config):
    """gen-suite, gen-data, train and report run end to end and stamp their outputs."""
    out = tmp_path / "out"
    common = ["--config", str(mini_config), "--out", str(out)]
    assert main(["gen-suite", *common]) == EXIT_OK
    assert main(["gen-data", *common]) == EXIT_OK
    assert main(["train", *common]) == EXIT_OK
    assert main(["report", *common]) == EXIT_OK

    suite = json.loads((out / "suite.json").read_text())
    assert len(suite["specs"]) == 16
    assert (out / "data" / "expert-forward" / "manifest.json").is_file()
    assert (out / "data" / "expert-forward" / RESOLVED_CONFIG_NAME).is_file()

    run = out / "train" / "expert-forward" / "iql" / "seed-0"
    for name in ("result.json", "log.csv", "evaluations.csv", RESOLVED_CONFIG_NAME, "version.txt", "seeds.json"):
        assert (run / name).is_file()
    results = pd.read_csv(out / "train" / "results.csv")
    assert results[["dataset", "method", "seed"]].values.tolist() == [["expert-forward", "iql", 0]]
    assert results["actor_samples"].iloc[0] == 2 * 4 * 16
    assert (out / "report.md").read_text().startswith("# Experiment report")
