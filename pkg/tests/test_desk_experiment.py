import importlib.util
import os

import pytest

SCRIPT = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts", "desk_experiment.py")


@pytest.fixture(scope="module")
def desk():
    spec = importlib.util.spec_from_file_location("desk_experiment", SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def _values(dice, gap, accuracy):
    return {"unseen_dice": dice, "gap": gap, "probe_accuracy": accuracy, "chance": 1 / 3}


def test_result_table_lists_seeds_medians_and_checks(desk):
    per_seed = [{"seed": s, "baseline": _values(0.6, 0.2, 0.9), "adversarial": _values(0.7, 0.1, 0.4)}
                for s in (0, 1)]
    summary = {"baseline": _values(0.6, 0.2, 0.9), "adversarial": _values(0.7, 0.1, 0.4)}
    checks = {"unseen-domain Dice: adversarial >= baseline": True, "wall time <= 15 min": False}

    table = desk._table(summary, per_seed, checks, 12.34, 60)

    assert "2 seeds, 60 phantoms per domain, 12.3 min wall time" in table
    assert "| 1 | adversarial | 0.700 | 0.100 | 0.400 | 0.333 |" in table
    assert "| median | baseline | 0.600 | 0.200 | 0.900 | 0.333 |" in table
    assert "| unseen-domain Dice: adversarial >= baseline | PASS |" in table
    assert "| wall time <= 15 min | FAIL |" in table
