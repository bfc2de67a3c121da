from pathlib import Path

import numpy as np
import pytest

from stab_flow.errors import ConfigurationError
from stab_flow.scenario import build_context, load_scenario, with_axis

SCENARIOS = Path(__file__).parent.parent / 'scenarios'

MINIMAL = """
[scenario]
name = 'tiny'
particles = 12
seed = 3
"""


def _write(tmp_path: Path, text: str) -> str:
    path = tmp_path / 'scenario.toml'
    path.write_text(text)
    return str(path)


def test_defaults_fill_missing_keys(tmp_path):
    """A scenario naming three keys gets the rest from the template."""
    scenario = load_scenario(_write(tmp_path, MINIMAL))
    assert scenario.name == 'tiny'
    assert scenario.particles == 12
    assert scenario.mode == 'local'
    assert scenario.field.label == 'linear_steer'
    assert scenario.feedback.kappa is None
    assert scenario.verify.moreau_kappas == (0.25, 0.5, 1.0)


def test_hash_ignores_file_location(tmp_path):
    """The same contents in two places hash alike, a changed seed does not."""
    first = load_scenario(_write(tmp_path, MINIMAL))
    other = tmp_path / 'other'
    other.mkdir()
    second = load_scenario(_write(other, MINIMAL))
    assert first.hash == second.hash
    assert first.with_seed(4).hash != first.hash


def test_radius_order_is_checked(tmp_path):
    """r >= R is a configuration error."""
    with pytest.raises(ConfigurationError, match='smaller'):
        load_scenario(_write(tmp_path, '[scenario]\nr = 2.0\nR = 2.0\n'))


def test_unknown_field_lists_labels(tmp_path):
    """The error names every supported field."""
    with pytest.raises(ConfigurationError, match='mean_attract'):
        load_scenario(_write(tmp_path, "[scenario.field]\nlabel = 'spiral'\n"))


def test_bad_values_are_rejected(tmp_path):
    """Wrong types, missing files and kappa above one fail early."""
    with pytest.raises(ConfigurationError):
        load_scenario(_write(tmp_path, "[scenario]\nparticles = 'many'\n"))
    with pytest.raises(ConfigurationError):
        load_scenario(_write(tmp_path, "[scenario.initial]\nkind = 'file'\npath = 'missing.csv'\n"))
    with pytest.raises(ConfigurationError):
        load_scenario(_write(tmp_path, '[scenario.feedback]\nkappa = 1.5\n'))
    with pytest.raises(ConfigurationError):
        load_scenario(str(tmp_path / 'absent.toml'))


def test_sweep_axes(tmp_path):
    """Each axis replaces exactly its field."""
    scenario = load_scenario(_write(tmp_path, MINIMAL))
    assert with_axis(scenario, 'N', 25).particles == 25
    assert with_axis(scenario, 'kappa', 0.5).feedback.kappa == 0.5
    assert with_axis(scenario, 'eps', 1e-4).feedback.eps == 1e-4
    stepped = with_axis(scenario, 'delta', 0.04)
    assert (stepped.partition.delta_min, stepped.partition.delta_max) == (0.02, 0.04)
    with pytest.raises(ConfigurationError):
        with_axis(scenario, 'N', 2.5)
    with pytest.raises(ConfigurationError):
        with_axis(scenario, 'gain', 1.0)


def test_context_is_seeded(tmp_path):
    """The initial measure sits on the sphere and depends only on the seed."""
    scenario = load_scenario(_write(tmp_path, MINIMAL))
    first, second = build_context(scenario), build_context(scenario)
    assert np.array_equal(first.initial.points, second.initial.points)
    assert first.initial.n == 12
    assert np.sqrt(np.mean(np.sum(first.initial.points**2, axis=1))) == pytest.approx(2.0)
    assert first.system.c0 == 1.0
    assert len(first.controls) == 9


def test_shipped_scenarios_load():
    """Every scenario in the repository validates."""
    for path in sorted(SCENARIOS.glob('*.toml')):
        scenario = load_scenario(str(path))
        assert scenario.r < scenario.R


def test_context_calibrates_eps0(tmp_path):
    """A control set without zero gets eps0 halved near the target; calibrate = false keeps it."""
    text = MINIMAL + """
r = 0.2
R = 0.4

[scenario.controls]
kind = 'list'
values = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]

[scenario.initial]
kind = 'sphere'
radius = 0.4
"""
    context = build_context(load_scenario(_write(tmp_path, text)))
    assert 1 / 32 <= context.clp.eps0 < 1.0

    fixed = build_context(load_scenario(_write(tmp_path, text + '\n[scenario.clp]\ncalibrate = false\n')))
    assert fixed.clp.eps0 == 1.0
