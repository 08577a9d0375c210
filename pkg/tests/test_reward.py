import math

import pytest
from hypothesis import given, strategies as st

from compgrpo.abstraction import descriptor_for
from compgrpo.reward import (
    RewardMode,
    RewardWeights,
    binary_reward,
    composite_reward,
    composition_reward,
    primitive_reward,
)

SCAN = descriptor_for("SCAN")
FUNQL = descriptor_for("FUNQL")
GOLD = "JUMP JUMP LTURN".split()


def t(text: str) -> list[str]:
    return text.split()


def test_binary():
    assert binary_reward(GOLD, GOLD) == 1
    assert binary_reward(t("JUMP LTURN LTURN"), GOLD) == 0
    assert binary_reward(GOLD + ["RUN"], GOLD) == 0


@pytest.mark.parametrize(
    "pred, expected",
    [("JUMP LTURN", 1.0), ("JUMP JUMP", 0.5), ("", 0.0)],
)
def test_primitive_reward(pred, expected):
    gold = GOLD if pred else ["JUMP"]
    assert math.isclose(primitive_reward(t(pred), gold, SCAN), expected, abs_tol=1e-9)


@pytest.mark.parametrize(
    "pred, gold, expected",
    [("JUMP JUMP LTURN", "RUN RUN LOOK", 1.0), ("JUMP LTURN", "JUMP JUMP LTURN", 1 / 3), ("JUMP", "JUMP", 1.0)],
)
def test_composition_reward(pred, gold, expected):
    assert math.isclose(composition_reward(t(pred), t(gold), SCAN), expected, abs_tol=1e-9)


def test_composite_without_binary_term():
    w = RewardWeights(0.1, 0.2, include_binary_term=False)
    assert math.isclose(composite_reward(GOLD, GOLD, SCAN, w).total, 0.3, abs_tol=1e-9)


def test_composite_with_binary_term():
    w = RewardWeights(0.1, 0.2, include_binary_term=True)
    assert math.isclose(composite_reward(GOLD, GOLD, SCAN, w).total, 1.3, abs_tol=1e-9)


def test_binary_mode_ignores_weights():
    for pred in (GOLD, t("JUMP LTURN")):
        r = composite_reward(pred, GOLD, SCAN, RewardWeights(5.0, 7.0), RewardMode.BINARY)
        assert r.total == binary_reward(pred, GOLD)


def test_ablation_modes():
    pred = t("JUMP JUMP")
    assert composite_reward(pred, GOLD, SCAN, mode="prim-only").total == 0.5
    assert math.isclose(composite_reward(pred, GOLD, SCAN, mode="comp-only").total, 2 / 3)


def test_zero_weights_rejected_for_composite():
    with pytest.raises(ValueError):
        composite_reward(GOLD, GOLD, SCAN, RewardWeights(0.0, 0.0), RewardMode.COMPOSITE)
    with pytest.raises(ValueError):
        RewardWeights(-0.1, 0.2).validate(RewardMode.BINARY)


def test_malformed_prediction_scores_low_without_raising():
    gold = t("answer ( state ( next_to ( stateid ( texas ) ) ) )")
    r = composite_reward(t(") ) next_to ( ("), gold, FUNQL)
    assert r.binary == 0 and 0.0 <= r.comp < 1.0


ACTIONS = ["WALK", "RUN", "JUMP", "LOOK", "LTURN", "RTURN"]
seqs = st.lists(st.sampled_from(ACTIONS), min_size=0, max_size=9)


@given(seqs, seqs.filter(bool))
def test_reward_ranges_and_domination(pred, gold):
    r = composite_reward(pred, gold, SCAN)
    assert 0.0 <= r.prim <= 1.0 and 0.0 <= r.comp <= 1.0
    assert r.binary <= r.prim and r.binary <= r.comp
    assert math.isclose(r.total, r.binary + 0.1 * r.prim + 0.2 * r.comp)


@given(seqs.filter(bool))
def test_exact_match_maximizes_every_component(gold):
    r = composite_reward(gold, gold, SCAN)
    assert (r.binary, r.prim, r.comp) == (1, 1.0, 1.0)
