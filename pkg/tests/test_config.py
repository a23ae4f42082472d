import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgpc.config import ConfigError, RunConfig, parse_config, parse_number, parse_overrides

MINIMAL = """
dim = 3
cells = 2
k1 = 2
k2 = 1
tau = 2^-8
T = 1/4
mms = beltrami
"""


def test_minimal_config_gets_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.n_steps == 64
    assert cfg.effective_delta == pytest.approx(1 / 12)
    assert cfg.effective_quad_points == 4
    assert cfg.epsilon == -1 and cfg.mu == 1.0
    assert cfg.momentum_rtol == 1e-10 and cfg.momentum_restart == 50
    assert cfg.momentum_preconditioner == "block-jacobi"


@pytest.mark.parametrize(
    "text, value",
    [("2^-13", 2.0**-13), ("1/8", 0.125), ("-3", -3.0), ("1e-3", 1e-3), ("0.5^2", 0.25), ("2 ^ 3", 8.0)],
)
def test_number_forms(text, value):
    assert parse_number(text) == value


def test_sectioned_and_dotted_keys():
    text = "[mesh]\ndim = 2\ncells = 4 2\n[discretization]\nk1 = 1\nk2 = 0\n[time]\ntau = 0.1\nT = 1\n[problem]\nmms = taylor_green\n"
    cfg = parse_config(text, ["forms.sigma_tilde=3", "tau=1/20"])
    assert cfg.cells == (4, 2)
    assert cfg.sigma_tilde == 3.0
    assert cfg.n_steps == 20


@pytest.mark.parametrize(
    "extra, key",
    [
        ("delta = 0.5", "delta"),
        ("colour = red", "colour"),
        ("epsilon = 2", "epsilon"),
        ("sigma_tilde = 0", "sigma_tilde"),
        ("mms = poiseuille", "mms"),
        ("momentum_rtol = 0", "momentum_rtol"),
        ("diagnostics = maybe", "diagnostics"),
    ],
)
def test_bad_values_name_their_key(extra, key):
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + extra + "\n")
    assert info.value.key == key


def test_degree_pair_outside_the_admissible_band():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("k1 = 2", "k1 = 1").replace("k2 = 1", "k2 = 3"))
    assert info.value.key == "k2"


@pytest.mark.parametrize(
    "text, key",
    [
        (MINIMAL.replace("mms = beltrami", ""), "mms"),
        (MINIMAL + "k1 = 3\n", "k1"),
        (MINIMAL.replace("T = 1/4", "T = 0.3"), "T"),
        (MINIMAL.replace("dim = 3", "dim = 2"), "mms"),
        (MINIMAL.replace("cells = 2", "cells = 2 2"), "cells"),
        ("[mesh]\ndim = 3\n[time]\nk1 = 2\n", "k1"),
    ],
)
def test_structural_errors(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


def test_unknown_section_and_bad_override():
    with pytest.raises(ConfigError):
        parse_config("[physics]\nmu = 1\n")
    with pytest.raises(ConfigError):
        parse_overrides(["tau"])
    with pytest.raises(ConfigError):
        parse_overrides(["nosuch.tau=1"])


def test_delta_at_the_upper_end_is_accepted():
    assert parse_config(MINIMAL + "delta = 1/12\n").delta == pytest.approx(1 / 12)


@settings(max_examples=40, deadline=None)
@given(
    k1=st.integers(1, 3),
    shift=st.integers(-1, 1),
    cells=st.integers(1, 6),
    log_tau=st.integers(1, 12),
    sig=st.floats(0.1, 1000, allow_nan=False),
    mu=st.floats(1e-4, 10, allow_nan=False),
    pre=st.sampled_from(["none", "block-jacobi", "two-level"]),
)
def test_text_round_trip(k1, shift, cells, log_tau, sig, mu, pre):
    k2 = k1 + shift
    cfg = RunConfig(
        dim=3, cells=cells, k1=k1, k2=k2, tau=2.0**-log_tau, T=1.0, mms="beltrami",
        sigma_tilde=sig, mu=mu, momentum_preconditioner=pre,
    )
    assert parse_config(cfg.to_text()) == cfg


def test_with_overrides_revalidates():
    cfg = parse_config(MINIMAL)
    assert cfg.with_overrides(tau=2.0**-4).n_steps == 4
    with pytest.raises(ConfigError):
        cfg.with_overrides(k2=5)
