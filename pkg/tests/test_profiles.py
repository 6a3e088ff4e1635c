import pytest

from nnleak.profiles import (ATMEGA, BUILTIN_PROFILES, PROFILE_DIR_ENV, ProfileError,
                             load_profile, parse_profile)


def test_builtins():
    assert load_profile() is ATMEGA
    assert set(BUILTIN_PROFILES) == {"atmega-like", "cortex-m0-like", "riscv-like"}
    assert (ATMEGA.frelu_pos, ATMEGA.frelu_zero, ATMEGA.frelu_neg) == (68, 56, 61)
    assert (ATMEGA.fixed_relu_nonneg, ATMEGA.fixed_relu_neg) == (10, 7)


def test_profile_dir(tmp_path, monkeypatch):
    (tmp_path / "slow.profile").write_text("base = atmega-like\nfmul_base = 200  # slower\n")
    monkeypatch.setenv(PROFILE_DIR_ENV, str(tmp_path))
    p = load_profile("slow")
    assert p.fmul_base == 200 and p.fadd_base == ATMEGA.fadd_base


def test_profile_errors():
    with pytest.raises(ProfileError):
        load_profile("no-such-profile")
    with pytest.raises(ProfileError, match="unknown key"):
        parse_profile("base = atmega-like\nbogus = 1\n")
    with pytest.raises(ProfileError, match="missing"):
        parse_profile("name = x\n")
    with pytest.raises(ProfileError, match="integer"):
        parse_profile("base = atmega-like\nfmul_base = fast\n")
