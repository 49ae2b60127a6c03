from __future__ import annotations

import pytest

from mfchaos.chaos import ExperimentPlan
from mfchaos.config import (SCHEMA, ConfigError, canonical_dump, config_hash, load_config, parse_config,
                            schema_reference)

MINIMAL = """\
model: constant
statistic: weak
N_list: [16, 64]
R: 100
seed: 1
"""


def test_minimal_config_echoes_values(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(MINIMAL)
    (plan,) = load_config(path)
    assert (plan.model, plan.statistic, plan.N_list, plan.R, plan.seed) == ("constant", "weak", [16, 64], 100, 1)
    assert plan.M == ExperimentPlan().M


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="NN_list"):
        parse_config(MINIMAL.replace("N_list", "NN_list"))
    with pytest.raises(ConfigError, match="flavour"):
        parse_config(MINIMAL + "init: {kind: gaussian, flavour: 2}\n")


def test_roundtrip_is_byte_stable():
    plans = parse_config(MINIMAL)
    text = canonical_dump(plans)
    again = parse_config(text)
    assert again == plans
    assert canonical_dump(again) == text
    assert config_hash(again) == config_hash(plans)


def test_experiment_lists_roundtrip():
    text = "experiments:\n  - {statistic: weak, N_list: [16], R: 40}\n  - {statistic: path, seed: 9}\n"
    plans = parse_config(text)
    assert [p.statistic for p in plans] == ["weak", "path"]
    assert parse_config(canonical_dump(plans)) == plans


def test_parse_error_reports_position():
    with pytest.raises(ConfigError, match="line 2, column 17"):
        parse_config("model: constant\nN_list: [16, 64]]\n")


@pytest.mark.parametrize("text,needle", [
    ("N_list: [16, 64]\nM: 256\n", "M/8"),
    ("R: many\n", "'R'"),
    ("model: vortex\n", "unknown model"),
    ("seed: -1\n", "seed"),
    ("model: ou\nmodel_params: {gamma: 1.0}\n", "model_params"),
    ("experiments: []\n", "non-empty"),
])
def test_constraint_violations(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_schema_reference_lists_every_key():
    ref = schema_reference()
    for key in SCHEMA:
        assert f"\n{key}: " in "\n" + ref
