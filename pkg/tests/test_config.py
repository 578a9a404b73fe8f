import pytest
from hypothesis import given, strategies as st

from dualgoal.config import ConfigError, ExperimentConfig
from dualgoal.data import RelabelRatios


def test_defaults_hold_table_values():
    c = ExperimentConfig()
    assert (c.learning_rate, c.batch_size, c.gamma) == (1e-4, 1024, 0.95)
    assert c.hidden == (1024, 1024, 1024, 1024)
    assert c.dqn_ratios == RelabelRatios(0.2, 0.0, 0.5, 0.3)
    assert (c.n_traj, c.traj_len) == (40_000, 25)
    assert c.gradient_steps == 100_000


def test_round_trip_is_idempotent():
    c = ExperimentConfig(n_x=3, n_y=3, hidden=(64, 32), encoder="ideal_dual", kappa=0.9)
    text = c.to_text()
    back = ExperimentConfig.from_text(text)
    assert back == c and back.to_text() == text and back.digest() == c.digest()


@given(
    st.integers(1, 5), st.integers(1, 5), st.floats(0.01, 0.99), st.lists(st.integers(1, 512), max_size=4),
    st.sampled_from(["original", "ideal_dual", "learned_dual"]),
)
def test_round_trip_property(nx, ny, gamma, hidden, encoder):
    c = ExperimentConfig(n_x=nx, n_y=ny, gamma=gamma, hidden=tuple(hidden), encoder=encoder)
    assert ExperimentConfig.from_text(c.to_text()) == c


def test_hash_is_pinned():
    # sha256 of the canonical default text; changes only if a default or key changes
    digest = "572581caacfd8b3bdc0a48db2d226946f9d256b75ac63ab787b1b281be610c48"
    assert ExperimentConfig().digest() == digest
    assert ExperimentConfig.from_text(ExperimentConfig().to_text()).digest() == digest


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="learning_rat"):
        ExperimentConfig.from_text("learning_rat = 0.1\n")


def test_ratio_sum_names_field():
    with pytest.raises(ConfigError, match="dqn_ratios"):
        ExperimentConfig.from_text("dqn_ratios = 0.2,0,0.4,0.3\n")


@pytest.mark.parametrize("line,key", [
    ("gamma = 1.0", "gamma"), ("kappa = 0", "kappa"), ("n_x = 0", "n_x"),
    ("encoder = fancy", "encoder"), ("batch_size = -3", "batch_size"), ("layer_norm = maybe", "layer_norm"),
    ("fig3_puzzles = 4by5", "fig3_puzzles"), ("n_x = 6\nn_y = 6", "n_x"),
])
def test_field_level_errors(line, key):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text(line)
    assert info.value.key == key


def test_comments_and_overrides():
    text = "# header\nn_x = 3  # rows\nn_y = 3\n\n"
    c = ExperimentConfig.from_text(text, {"gradient-steps": "500"})
    assert (c.n_x, c.gradient_steps) == (3, 500)


def test_derived_properties():
    c = ExperimentConfig(encoder="ideal_dual")
    assert c.use_dual_state
    assert not c.replace(encoder="original").use_dual_state
    assert c.replace(dual_state_input="false").use_dual_state is False
    assert c.total_repr_steps == c.gradient_steps
    assert [p.name for p in c.puzzles()] == ["puzzle-4x5", "puzzle-4x6"]
