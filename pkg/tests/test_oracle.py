"""Simulated-annotator tests: truth answers, deterministic flips, flip rate."""

import pytest

from spectrum_sentinel import oracle
from spectrum_sentinel.errors import InvalidArgument


KINDS = {
    "w1": "wpulse", "w2": "wpulse",
    "s1": "scont", "s2": "scont",
    "r1": "randpulses",
    "n1": oracle.NORMAL_KIND,
}


class TestAnswerPair:
    def test_same_kind_true(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.0, seed=1)
        assert oracle.answer_pair(cfg, "w1", "w2") is True

    def test_different_kind_false(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.0, seed=1)
        assert oracle.answer_pair(cfg, "w1", "s1") is False

    def test_p_one_inverts_every_answer(self):
        honest = oracle.make_oracle(KINDS, p_incorrect=0.0, seed=7)
        liar = oracle.make_oracle(KINDS, p_incorrect=1.0, seed=7)
        ids = list(KINDS)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                assert oracle.answer_pair(liar, a, b) == (not oracle.answer_pair(honest, a, b))

    def test_order_independent(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.3, seed=3)
        assert oracle.answer_pair(cfg, "w1", "s1") == oracle.answer_pair(cfg, "s1", "w1")

    def test_unknown_id(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.0, seed=1)
        with pytest.raises(InvalidArgument):
            oracle.answer_pair(cfg, "w1", "ghost")


class TestAnswerLabel:
    def test_designated_normal_kind_answers_false(self):
        kinds = dict(KINDS)
        cfg = oracle.make_oracle(kinds, p_incorrect=0.0, seed=1,
                                 anomalous_kinds=frozenset({"scont", "randpulses"}))
        assert oracle.answer_label(cfg, "w1") is False  # wpulse redesignated normal
        assert oracle.answer_label(cfg, "s1") is True
        assert oracle.answer_label(cfg, "n1") is False

    def test_replay_determinism(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.4, seed=9)
        first = [oracle.answer_label(cfg, i) for i in KINDS]
        second = [oracle.answer_label(cfg, i) for i in KINDS]
        assert first == second

    def test_flip_fraction_concentrates(self):
        kinds = {f"id{i}": "scont" for i in range(10000)}
        honest = oracle.make_oracle(kinds, p_incorrect=0.0, seed=11)
        noisy = oracle.make_oracle(kinds, p_incorrect=0.05, seed=11)
        flips = sum(
            oracle.answer_label(noisy, i) != oracle.answer_label(honest, i) for i in kinds)
        assert 0.04 <= flips / len(kinds) <= 0.06

    def test_unknown_id(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.0, seed=1)
        with pytest.raises(InvalidArgument):
            oracle.answer_label(cfg, "ghost")

    def test_p_incorrect_validated(self):
        with pytest.raises(InvalidArgument):
            oracle.make_oracle(KINDS, p_incorrect=1.5, seed=0)

    def test_interleaving_does_not_change_answers(self):
        cfg = oracle.make_oracle(KINDS, p_incorrect=0.5, seed=13)
        a_then_b = (oracle.answer_pair(cfg, "w1", "w2"), oracle.answer_pair(cfg, "s1", "s2"))
        b_then_a = (oracle.answer_pair(cfg, "s1", "s2"), oracle.answer_pair(cfg, "w1", "w2"))
        assert a_then_b == (b_then_a[1], b_then_a[0])
