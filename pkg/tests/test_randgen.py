"""Random candidate generation, restrictions, dedup, c_t expansion."""

import numpy as np

from rnndsl.dsl import OpKind, analyze, builtin, parse, render
from rnndsl.randgen import (
    GenConfig,
    arch_id,
    check_restrictions,
    expand_ct_variants,
    generate_batch,
    grow_random,
)

EXAMPLE_21 = "Mult(Sigmoid(MM(x_t)),Tanh(Add(MM(h_tm1),Mult(MM(c_tm1),MM(x_t)))))"


class TestGrowRandom:
    def test_max_height_zero_gives_leaf(self):
        arch = grow_random(GenConfig(max_height=0, seed=1))
        assert arch.root.op.is_source

    def test_height_bound_respected(self):
        cfg = GenConfig(max_height=4, seed=2)
        rng = np.random.default_rng(2)
        for _ in range(300):
            arch = grow_random(cfg, rng)
            assert analyze(arch).height <= 4

    def test_deterministic_sequence(self):
        cfg = GenConfig(seed=3)
        a = [render(grow_random(cfg, np.random.default_rng(3))) for _ in range(5)]
        b = [render(grow_random(cfg, np.random.default_rng(3))) for _ in range(5)]
        assert a == b

    def test_adversarial_ternary_weights_still_bounded(self):
        weights = {op: 0.001 for op in OpKind if not op.is_source}
        weights[OpKind.GATE3] = 1000.0
        cfg = GenConfig(max_height=5, operator_weights=weights, seed=4)
        rng = np.random.default_rng(4)
        for _ in range(100):
            assert analyze(grow_random(cfg, rng)).height <= 5


class TestCheckRestrictions:
    def test_gru_clean(self):
        assert check_restrictions(builtin("gru"), GenConfig()).admissible

    def test_stacked_mm(self):
        rep = check_restrictions(
            parse("Tanh(Add(MM(MM(x_t)),MM(h_tm1)))"), GenConfig()
        )
        assert "stacked_identical" in rep.violations

    def test_gate_not_sigmoid(self):
        rep = check_restrictions(
            parse("Gate3(x_t,h_tm1,Tanh(MM(x_t)))"), GenConfig()
        )
        assert "gate_not_sigmoid" in rep.violations

    def test_missing_required_sources(self):
        rep = check_restrictions(parse("Tanh(MM(x_t))"), GenConfig())
        assert "missing_h" in rep.violations
        rep = check_restrictions(parse("Tanh(MM(h_tm1))"), GenConfig())
        assert "missing_x" in rep.violations

    def test_size_violation(self):
        rep = check_restrictions(builtin("gru"), GenConfig(max_nodes=5))
        assert "too_big" in rep.violations


class TestExpandCtVariants:
    def test_example_three_variants(self):
        variants = expand_ct_variants(parse(EXAMPLE_21))
        assert len(variants) == 3
        assert len({v.ct_node for v in variants}) == 3

    def test_no_cm1_identity(self):
        arch = builtin("tanh_rnn")
        assert expand_ct_variants(arch) == [arch]

    def test_cm1_without_valid_tap_empty(self):
        assert expand_ct_variants(parse("Tanh(MM(c_tm1))")) == []


class TestGenerateBatch:
    def test_distinct_ids(self):
        batch = generate_batch(GenConfig(seed=5), 100)
        ids = [arch_id(a) for a in batch]
        assert len(batch) == 100
        assert len(set(ids)) == 100

    def test_seen_excluded(self):
        cfg = GenConfig(seed=6)
        first = generate_batch(cfg, 50, rng=np.random.default_rng(6))
        seen = {arch_id(a) for a in first}
        second = generate_batch(cfg, 50, seen=seen, rng=np.random.default_rng(6))
        assert seen.isdisjoint({arch_id(a) for a in second})

    def test_core_dsl_excludes_extended(self):
        extended = {op for op in OpKind if op.extended}
        for arch in generate_batch(GenConfig(seed=7, extended_dsl=False), 200):
            assert not ({n.op for n in arch.root.walk()} & extended)

    def test_all_admissible(self):
        cfg = GenConfig(seed=8)
        for arch in generate_batch(cfg, 500):
            assert check_restrictions(arch, cfg).admissible

    def test_id_stable_under_recanonicalization(self):
        from rnndsl.dsl import canonicalize

        for arch in generate_batch(GenConfig(seed=9), 50):
            assert arch_id(arch) == arch_id(canonicalize(arch))
