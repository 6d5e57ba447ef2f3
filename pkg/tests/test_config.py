import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccv.cycle import CcvConfig
from ccv.harness.config import ConfigError, ExperimentConfig, parse_config, serialize_config

SAMPLE = """
# experiment definition
[experiment]
checkpoint = runs/model.ccvw
dataset = data   # not a comment: values run to end of line
context_size = 4

[ccv]
threshold = 0.85
update_second = false
"""


class TestParse:
    def test_sections_and_comments(self):
        sections = parse_config(SAMPLE)
        assert set(sections) == {"experiment", "ccv"}
        assert sections["experiment"]["checkpoint"] == "runs/model.ccvw"
        assert sections["experiment"]["dataset"] == "data   # not a comment: values run to end of line"
        assert sections["ccv"] == {"threshold": "0.85", "update_second": "false"}

    def test_keys_before_any_section(self):
        assert parse_config("a = 1\n[s]\nb = 2\n") == {"": {"a": "1"}, "s": {"b": "2"}}

    def test_value_may_contain_equals(self):
        assert parse_config("k = a=b\n") == {"": {"k": "a=b"}}

    def test_last_duplicate_wins(self):
        assert parse_config("k = 1\nk = 2\n") == {"": {"k": "2"}}

    @pytest.mark.parametrize("text", ["[open\n", "novalue\n", " = 3\n"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config(text)


_name = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_0123456789", min_size=1, max_size=8)
_value = st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp")), max_size=12).map(str.strip)


class TestRoundtrip:
    @settings(max_examples=100, deadline=None)
    @given(st.dictionaries(_name, st.dictionaries(_name, _value, max_size=4), max_size=3))
    def test_fixed_point(self, sections):
        once = parse_config(serialize_config(sections))
        assert parse_config(serialize_config(once)) == once

    def test_sample_fixed_point(self):
        once = parse_config(SAMPLE)
        assert parse_config(serialize_config(once)) == once


class TestExperimentConfig:
    def test_typed_fields(self):
        cfg = ExperimentConfig.from_sections(parse_config(SAMPLE))
        assert cfg.context_size == 4
        assert cfg.ccv.threshold == 0.85
        assert cfg.ccv.update_second is False
        assert cfg.ccv.max_iters == CcvConfig().max_iters

    def test_dump_load_identity(self, tmp_path):
        cfg = ExperimentConfig(context_selection="knn", shift_magnitude=0.25,
                               ccv=CcvConfig(prompt_mode="border", select_final="best"))
        (tmp_path / "c.cfg").write_text(cfg.dump())
        assert ExperimentConfig.load(tmp_path / "c.cfg") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'colour'"):
            ExperimentConfig.from_sections({"experiment": {"colour": "red"}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            ExperimentConfig.from_sections({"model": {}})

    def test_bad_number(self):
        with pytest.raises(ConfigError, match="context_size"):
            ExperimentConfig.from_sections({"experiment": {"context_size": "eight"}})

    def test_invalid_ccv_block(self):
        with pytest.raises(ConfigError, match="objective"):
            ExperimentConfig.from_sections({"ccv": {"objective": "mystery"}})
