from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specdraft.engine import GenerationConfig, Strategy, draft_sequential, generate
from specdraft.errors import InvalidArgumentError, InvalidConfigError, InvalidInputError
from specdraft.models import SsmDrafter, TabularModel, mixed_drafter
from specdraft.rng import RoundStreams
from specdraft.tree import (
    PlanCache,
    TreeConfig,
    batch_sizes,
    build_cache_plan,
    draft_tree,
    flatten_for_scoring,
    node_count,
    plan_for,
    target_score_tree,
    verify_tree,
)
from specdraft.verify import verify_sequential

from oracles import (
    ScriptedRng,
    autoregressive_distribution,
    build_tree,
    node_target_dists,
    ordered_samples_without_replacement,
    segment_points,
    total_variation,
    tree_sd_distribution,
)

configs = st.lists(st.integers(1, 4), min_size=1, max_size=6).map(lambda w: TreeConfig(tuple(w)))


@pytest.fixture
def pair():
    target = TabularModel.from_seed(8, 2, 21, concentration=0.5)
    return target, mixed_drafter(target, 0.5, 22)


class TestTreeConfig:
    def test_parse_and_str(self):
        cfg = TreeConfig.parse("3,2,2,1,1")
        assert cfg.widths == (3, 2, 2, 1, 1) and cfg.gamma == 5
        assert str(cfg) == "3,2,2,1,1"

    @pytest.mark.parametrize("text", ["", "3,0", "a,b", "2,-1"])
    def test_invalid(self, text):
        with pytest.raises(InvalidConfigError):
            TreeConfig.parse(text)


class TestBatchSizes:
    @pytest.mark.parametrize(
        "widths, expected",
        [((3, 2, 2, 1, 1), (3, 6, 12, 12, 12)), ((1, 1, 1), (1, 1, 1)), ((2, 2, 2, 1, 1, 1), (2, 4, 8, 8, 8, 8))],
    )
    def test_examples(self, widths, expected):
        assert batch_sizes(TreeConfig(widths)) == expected

    @given(configs)
    def test_cumulative_product(self, cfg):
        sizes = batch_sizes(cfg)
        for i, b in enumerate(sizes):
            prod = 1
            for w in cfg.widths[: i + 1]:
                prod *= w
            assert b == prod


class TestCachePlan:
    def test_buffer_sizes(self):
        plan = build_cache_plan(TreeConfig((3, 2, 2, 1, 1)), state_dim=16, vocab_size=8)
        assert [s.shape for s in plan.states] == [(b, 16) for b in (3, 6, 12, 12, 12)]
        assert [len(t) for t in plan.tokens] == [3, 6, 12, 12, 12]

    def test_zero_state_dim(self):
        with pytest.raises(InvalidArgumentError):
            build_cache_plan(TreeConfig((2,)), state_dim=0, vocab_size=8)

    def test_no_allocations_across_rounds(self):
        drafter = SsmDrafter.from_seed(16, 8, seed=1)
        cfg = TreeConfig((3, 2, 2, 1, 1))
        plan = plan_for(drafter, cfg)
        streams = RoundStreams(0)
        root = drafter.init_state([1, 2, 3])
        draft_tree(drafter, root, cfg, plan, streams, 0)
        allocs, addrs = plan.allocations, plan.buffer_addresses()
        for r in range(1, 100):
            draft_tree(drafter, root, cfg, plan, streams, r)
        assert plan.allocations == allocs
        assert plan.buffer_addresses() == addrs

    def test_alternating_configs_keep_one_plan_each(self):
        drafter = SsmDrafter.from_seed(16, 8, seed=1)
        plans = PlanCache(drafter)
        a, b = TreeConfig((2, 2)), TreeConfig((3, 1, 1))
        first = {a: plans.get(a), b: plans.get(b)}
        allocs = plans.allocations
        for _ in range(10):
            for cfg in (a, b):
                assert plans.get(cfg) is first[cfg]
        assert len(plans) == 2 and plans.allocations == allocs

    def test_plan_for_wrong_config(self):
        drafter = SsmDrafter.from_seed(8, 4, seed=1)
        plan = plan_for(drafter, TreeConfig((2,)))
        with pytest.raises(InvalidConfigError):
            draft_tree(drafter, drafter.init_state([]), TreeConfig((3,)), plan, RoundStreams(0))


class TestDraftTree:
    def test_path_tree_matches_sequential(self, pair):
        _, drafter = pair
        cfg = TreeConfig((1, 1, 1))
        streams = RoundStreams(5)
        root = drafter.init_state([3, 4])
        for r in range(20):
            tree = draft_tree(drafter, root, cfg, plan_for(drafter, cfg), streams, r)
            seq = draft_sequential(drafter, root, 3, streams, r)
            assert [int(t[0]) for t in tree.tokens] == seq.tokens
            assert [float(q[0]) for q in tree.q_probs] == seq.q_probs

    def test_siblings_exhaust_small_vocab(self):
        drafter = TabularModel(2, 1, [[0.7, 0.3]])
        cfg = TreeConfig((2, 1))
        for r in range(10):
            tree = draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(r), r)
            assert sorted(tree.tokens[0].tolist()) == [0, 1]

    def test_node_count(self, pair):
        _, drafter = pair
        cfg = TreeConfig((3, 2, 2, 1, 1))
        tree = draft_tree(drafter, drafter.init_state([1]), cfg, plan_for(drafter, cfg), RoundStreams(0))
        assert tree.n_nodes == node_count(cfg) == 45

    def test_width_larger_than_vocab(self):
        drafter = TabularModel(2, 1, [[0.7, 0.3]])
        cfg = TreeConfig((3,))
        with pytest.raises(InvalidConfigError):
            draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(0))

    def test_states_are_stepped_parent_states(self):
        drafter = SsmDrafter.from_seed(10, 6, seed=3)
        cfg = TreeConfig((3, 2, 2))
        root = drafter.init_state([1, 2])
        tree = draft_tree(drafter, root, cfg, plan := plan_for(drafter, cfg), RoundStreams(1))
        parents = [root]
        for d in range(cfg.gamma):
            level = []
            for j, tok in enumerate(tree.tokens[d]):
                state, dist = drafter.step(parents[tree.parents[d][j]], int(tok))
                np.testing.assert_array_equal(plan.states[d][j], state.payload)
                np.testing.assert_allclose(plan.probs[d][j], dist, rtol=1e-12)
                np.testing.assert_allclose(tree.node_q_dist(d + 1, j)[tok], tree.q_probs[d][j])
                level.append(state)
            parents = level

    def test_greedy_takes_top_tokens(self, pair):
        _, drafter = pair
        cfg = TreeConfig((3,))
        root = drafter.init_state([2])
        tree = draft_tree(drafter, root, cfg, plan_for(drafter, cfg), RoundStreams(0), mode="greedy")
        q = drafter.distribution(root)
        assert tree.tokens[0].tolist() == list(np.argsort(-q, kind="stable")[:3])

    @settings(max_examples=40, deadline=None)
    @given(cfg=configs, seed=st.integers(0, 1000))
    def test_siblings_distinct_and_count(self, cfg, seed):
        drafter = SsmDrafter.from_seed(6, 4, seed=seed)
        tree = draft_tree(drafter, drafter.init_state([seed % 6]), cfg, plan_for(drafter, cfg), RoundStreams(seed))
        assert tree.n_nodes == sum(batch_sizes(cfg))
        for d, width in enumerate(cfg.widths):
            toks = tree.tokens[d].reshape(-1, width)
            for row in toks:
                assert len(set(row.tolist())) == width


class TestFlatten:
    def test_path_tree(self, pair):
        _, drafter = pair
        cfg = TreeConfig((1, 1, 1))
        tree = draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(0))
        flat = flatten_for_scoring(tree)
        assert flat.paths.shape == (1, 3)
        assert flat.node_ids.tolist() == [[1, 2, 3]]

    def test_two_paths_share_only_root(self, pair):
        _, drafter = pair
        cfg = TreeConfig((2, 1))
        tree = draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(0))
        flat = flatten_for_scoring(tree)
        assert flat.paths.shape == (2, 2)
        assert set(flat.node_ids[0]).isdisjoint(flat.node_ids[1])

    def test_distinct_positions_equal_node_count(self, pair):
        _, drafter = pair
        cfg = TreeConfig((3, 2, 2, 1, 1))
        tree = draft_tree(drafter, drafter.init_state([5]), cfg, plan_for(drafter, cfg), RoundStreams(3))
        flat = flatten_for_scoring(tree)
        assert flat.paths.shape == (12, 5)
        # oracle: a node is its (parent-chain, token) pair, i.e. a path prefix
        distinct = {tuple(path[: d + 1]) for path in flat.paths.tolist() for d in range(5)}
        assert len(distinct) == 45 == flat.n_distinct
        assert flat.paths.size == 60


class TestVerifyTree:
    def test_path_tree_reduces_to_sequential(self, pair):
        target, drafter = pair
        cfg = TreeConfig((1, 1, 1, 1))
        prefix = [0, 3]
        for r in range(50):
            streams = RoundStreams(r)
            tree = draft_tree(drafter, drafter.init_state(prefix), cfg, plan_for(drafter, cfg), streams, r)
            seq = draft_sequential(drafter, drafter.init_state(prefix), 4, streams, r)
            p_nodes = target_score_tree(target, prefix, tree)
            p_seq = target.score(prefix, seq.tokens)
            np.testing.assert_array_equal(p_nodes, np.array(p_seq))
            for mode in ("greedy", "sampling"):
                a = verify_tree(p_nodes, tree, mode, streams.verify(r))
                b = verify_sequential(p_seq, seq, mode, streams.verify(r))
                assert a.committed == b.committed
                assert a.n_accepted_drafts == b.n_accepted_drafts and a.used_bonus == b.used_bonus

    def test_greedy_no_child_matches(self):
        drafter = TabularModel(3, 1, [[0.4, 0.4, 0.2]])
        target = TabularModel(3, 1, [[0.1, 0.1, 0.8]])
        cfg = TreeConfig((2, 1))
        tree = draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(0), mode="greedy")
        assert sorted(tree.tokens[0].tolist()) == [0, 1]
        out = verify_tree(target_score_tree(target, [], tree), tree, "greedy", None)
        assert out.committed == [2] and out.n_accepted_drafts == 0

    def test_greedy_follows_matching_child(self):
        target = TabularModel.from_seed(5, 2, 3, concentration=0.3)
        drafter = mixed_drafter(target, 0.9, 4)
        cfg = TreeConfig((5, 5))  # full width always contains the argmax
        tree = draft_tree(drafter, drafter.init_state([1]), cfg, plan_for(drafter, cfg), RoundStreams(0), mode="greedy")
        out = verify_tree(target_score_tree(target, [1], tree), tree, "greedy", None)
        assert out.used_bonus and len(out.committed) == 3
        assert out.committed == [int(np.argmax(target.next_dist([1] + out.committed[:i]))) for i in range(3)]

    def test_first_token_distributed_as_target(self):
        # vocab 2, config (2,1): enumerate sibling order, u intervals and residual draws
        target = TabularModel(2, 2, [[0.35, 0.65], [0.8, 0.2], [0.6, 0.4]])
        drafter = TabularModel(2, 2, [[0.5, 0.5], [0.3, 0.7], [0.9, 0.1]])
        cfg = TreeConfig((2, 1))
        first = defaultdict(float)
        for order, w_order in ordered_samples_without_replacement(drafter.next_dist([]), 2):
            # depth-2 children of each depth-1 node: single child, enumerate its token
            for c0 in range(2):
                for c1 in range(2):
                    kids = [order, (c0,), (c1,)]
                    tree, _ = build_tree(cfg, drafter, [], kids)
                    w = w_order * tree.q_probs[1][0] * tree.q_probs[1][1]
                    p_nodes = node_target_dists(target, [], tree)
                    for script, ws in _scripts(tree, p_nodes):
                        out = verify_tree(p_nodes, tree, "sampling", ScriptedRng(script))
                        first[out.committed[0]] += w * ws
        assert first[0] == pytest.approx(0.6, abs=1e-12)
        assert first[1] == pytest.approx(0.4, abs=1e-12)

    def test_missing_node_distribution(self, pair):
        target, drafter = pair
        cfg = TreeConfig((2, 2))
        tree = draft_tree(drafter, drafter.init_state([]), cfg, plan_for(drafter, cfg), RoundStreams(0))
        p_nodes = target_score_tree(target, [], tree)
        with pytest.raises(InvalidInputError):
            verify_tree(p_nodes[:-1], tree, "sampling", np.random.default_rng(0))

    @pytest.mark.parametrize("widths, vocab", [((2, 1), 4), ((2, 2), 3), ((1, 2), 4)])
    def test_lossless_by_enumeration(self, widths, vocab):
        target = TabularModel.from_seed(vocab, 2, 31, concentration=0.6)
        drafter = mixed_drafter(target, 0.7, 32)
        sd = tree_sd_distribution(target, drafter, [0], TreeConfig(widths), horizon=2)
        assert total_variation(sd, autoregressive_distribution(target, [0], 2)) < 1e-9


def _scripts(tree, p_nodes):
    """(uniform script, weight) for every branch of one tree verification (independent re-derivation)."""
    out = []

    def walk(depth, node, gid, script, w):
        if depth == tree.gamma:
            out.extend((script + [u], w * m) for u, _, m in segment_points(p_nodes[gid]))
            return
        p, q = p_nodes[gid].copy(), tree.q_dists[depth][node].copy()
        for k in tree.children(depth, node):
            tok = int(tree.tokens[depth][k])
            a = min(1.0, p[tok] / q[tok])
            if a > 0:
                walk(depth + 1, k, tree.offsets()[depth] + k, script + [a / 2], w * a)
            if a == 1:
                return
            w *= 1 - a
            script = script + [(1 + a) / 2]
            diff = np.maximum(p - q, 0)
            p = diff / diff.sum() if diff.sum() > 1e-12 else p
            q[tok] = 0
            q = q / q.sum() if q.sum() else q
        out.extend((script + [u], w * m) for u, _, m in segment_points(p))

    walk(0, 0, 0, [], 1.0)
    return out


def test_path_tree_strategy_matches_sequential_strategy(pair):
    target, drafter = pair
    seq_counts, tree_counts = [], []
    for seed in range(150):
        a, ma = generate(target, drafter, [1, 2], GenerationConfig(Strategy.sequential(3), "sampling", 20, seed=seed))
        b, mb = generate(target, drafter, [1, 2], GenerationConfig(Strategy.tree("1,1,1"), "sampling", 20, seed=seed))
        assert a == b
        seq_counts += [r.committed for r in ma.rounds]
        tree_counts += [r.committed for r in mb.rounds]
    assert np.mean(tree_counts) == pytest.approx(np.mean(seq_counts), rel=0.02)
