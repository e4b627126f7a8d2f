import pytest
from hypothesis import given, strategies as st

from esscale.config import ConfigError, defaults, dump, load_config, parse


def test_minimal_file_gets_defaults(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[es]\nsigma=0.1\n")
    cfg = load_config(f)
    assert cfg["es"]["sigma"] == 0.1
    assert cfg["es"]["pop_pairs"] == 50 and cfg["distrib"]["port"] == 7580
    assert cfg.es_config().optimizer == "adam"


def test_sigma_default_depends_on_env():
    assert parse("").es_config().sigma == 0.1
    assert parse("[env]\nname = pole\n").es_config().sigma == 0.02


@pytest.mark.parametrize("text,line,needle", [
    ("[es]\nsigma=-1\n", None, "sigma"),
    ("[es]\n\nbogus = 1\n", 3, "unknown key"),
    ("[nope]\n", 1, "unknown section"),
    ("sigma = 1\n", 1, "outside"),
    ("[es]\npop_pairs = many\n", 2, "pop_pairs"),
    ("[es]\nsigma\n", 2, "key = value"),
    ("[env]\nname = atari\n", None, "env.name"),
    ("[policy]\nvbn = maybe\n", 2, "vbn"),
    ("[run]\nseed = 1\n[es\n", 3, "header"),
])
def test_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse(text)
    assert info.value.line == line
    assert needle in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_round_trip_defaults():
    cfg = defaults()
    assert parse(dump(cfg)).sections == parse("").sections


@given(st.floats(1e-4, 10), st.integers(1, 500), st.sampled_from(["sgd", "momentum", "adam"]),
       st.lists(st.integers(1, 128), max_size=3), st.booleans(),
       st.sampled_from(["sphere", "pole", "chain"]))
def test_round_trip(sigma, pairs, opt, hidden, vbn, env):
    text = (f"[es]\nsigma = {sigma!r}\npop_pairs = {pairs}\noptimizer = {opt}\n"
            f"[policy]\nhidden = {', '.join(map(str, hidden))}\nvbn = {vbn}\n"
            f"[env]\nname = {env}\n")
    cfg = parse(text)
    assert parse(dump(cfg)).sections == cfg.sections


def test_comments_and_blank_lines():
    cfg = parse("# top\n\n[run]  # trailing\nseed = 9  # the seed\n")
    assert cfg["run"]["seed"] == 9


def test_policy_spec_from_config():
    cfg = parse("[env]\nname = pole\nforce_mag = 5\n[policy]\nhidden = 4 4\n"
                "action_mode = discretized\nbins = 3\n")
    spec = cfg.policy_spec()
    assert spec.hidden == (4, 4) and spec.bins == 3 and (spec.low, spec.high) == (-5.0, 5.0)
