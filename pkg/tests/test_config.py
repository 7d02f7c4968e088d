import pytest

from fairshift.config import METHODS, RunConfig, parse_config_text
from fairshift.errors import ConfigError


def test_parse_values_and_comments():
    got = parse_config_text("# header\nmethod = laftr  # trailing\ntrain.tau = 0.9\nrun.seeds = 1, 2\nablation.no_teacher_update = true\n")
    assert got == {"method": "laftr", "train.tau": 0.9, "run.seeds": [1, 2], "ablation.no_teacher_update": True}
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here")


def test_text_round_trip(tmp_path):
    cfg = RunConfig.from_mapping({"scenario.kind": "Hshift", "method": "cfair+dann", "run.seeds": [3, 4], "train.w_cons": 0.25})
    path = tmp_path / "cfg"
    path.write_text(cfg.to_text())
    back = RunConfig.from_file(path)
    assert back == cfg and back.hash() == cfg.hash()


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_mapping({"train.epoch": 3})
    assert "train.epoch" in str(err.value)


@pytest.mark.parametrize(
    "mapping",
    [
        {"method": "nope"},
        {"scenario.kind": "Custom"},
        {"train.epochs": 0},
        {"optim.momentum": 1.0},
        {"ablation.consistency_domain": "elsewhere"},
        {"train.epochs": 2.5},
        {"ablation.no_teacher_update": 1},
        {"train.denominator": "median"},
    ],
)
def test_invalid_values_are_config_errors(mapping):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(mapping)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "absent")


def test_hash_depends_on_values_and_seed():
    cfg = RunConfig()
    assert cfg.hash() == RunConfig().hash()
    assert cfg.hash() != cfg.replace(train_tau=0.9).hash()
    assert cfg.hash(0) != cfg.hash(1)


def test_method_table_drives_train_config():
    for name, (fair, cons, dann) in METHODS.items():
        tc = RunConfig(method=name).train_config()
        assert tc.fairness == fair and tc.consistency == cons and tc.dann == dann
        assert (tc.w_cons > 0) == (cons != "none")


def test_selection_split():
    assert RunConfig(method="laftr").selection_split == "source"
    assert RunConfig(method="ours-laftr").selection_split == "target"
    assert RunConfig(method="laftr", eval_selection="target").selection_split == "target"
