import pytest

from hit.config import ConfigFileError, RunConfig, dump_config, parse_config, parse_config_text
from hit.model import HiTConfig


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    assert parse_config(tmp_path / "c.txt") == RunConfig()


def test_single_override():
    explicit = set()
    cfg = parse_config_text("[model]\ndepth = 6  # deeper\n", explicit=explicit)
    assert cfg.model == HiTConfig(depth=6)
    assert cfg.train == RunConfig().train and explicit == {("model", "depth")}


def test_dump_reparse_round_trip():
    text = "[model]\npool_layers = 1, 3\nheads = 2\n[train]\nlr = 0.0005\nhflip = true\n[data]\nnoise = 0.5\n"
    cfg = parse_config_text(text)
    assert cfg.model.pool_layers == (1, 3) and cfg.train.hflip is True
    assert parse_config_text(dump_config(cfg)) == cfg
    assert parse_config_text(dump_config(RunConfig())) == RunConfig()


@pytest.mark.parametrize(
    "text, line, needle",
    [
        ("[model]\n\ncolour = red\n", 3, "unknown key"),
        ("[model]\ndepth = four\n", 2, "depth"),
        ("[nonsense]\n", 1, "unknown section"),
        ("depth = 4\n", 1, "outside any section"),
        ("[train]\nlr\n", 2, "key = value"),
        ("[model]\nheads = 3\n", 2, "divisible"),
    ],
)
def test_errors_name_the_line(text, line, needle):
    with pytest.raises(ConfigFileError, match=needle) as info:
        parse_config_text(text, path="c.txt")
    assert info.value.line == line
    assert f"c.txt:{line}" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigFileError, match="cannot read"):
        parse_config(tmp_path / "absent.txt")
