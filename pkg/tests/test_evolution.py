import numpy as np
import networkx as nx
import pytest

from esl.evolution import (EvolutionConfig, LabelMap, UnionFind, merge_condition,
                           merge_groups, produce, should_drop)
from esl.margin_loss import SubCenterBank
from esl.stats import StatEntry


def entry(n, mu, sigma, lam1=2.0):
    return StatEntry(n, mu, sigma, mu + lam1 * sigma)


def make_bank(weights_by_class):
    bank = SubCenterBank()
    for label in sorted(weights_by_class):
        bank.centers[label] = []
        for w in weights_by_class[label]:
            bank.add_center(label, np.asarray(w, dtype=np.float64))
    return bank


class TestProduce:
    def test_no_sample_below_threshold(self):
        feats = np.eye(3)
        cos = np.array([0.9, 0.8, 0.95])
        assert produce(feats, cos, entry(3, 0.5, 0.1), 2.0) is None

    def test_single_sample_below(self):
        v = np.array([3.0, 0.0, 4.0])
        feats = np.stack([v, np.array([0.0, 1.0, 0.0])])
        cos = np.array([0.1, 0.9])
        w = produce(feats, cos, entry(2, 0.8, 0.1), 2.0)  # bound 0.6: only cos=0.1 below
        assert np.allclose(w, v / np.linalg.norm(v), atol=1e-12)

    def test_matches_brute_force_filter_and_average(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            feats = rng.standard_normal((n, 6))
            cos = rng.uniform(-1, 1, n)
            mu, sigma = float(rng.uniform(-0.5, 0.9)), float(rng.uniform(0, 0.3))
            got = produce(feats, cos, entry(n, mu, sigma), 2.0)
            sel = [i for i in range(n) if cos[i] < mu - 2.0 * sigma]
            if not sel:
                assert got is None
            else:
                want = sum(feats[i] for i in sel) / len(sel)
                want /= np.linalg.norm(want)
                assert np.allclose(got, want, atol=1e-12)

    def test_new_center_unit_norm(self):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((10, 5)) * 7
        cos = np.full(10, -0.5)
        w = produce(feats, cos, entry(10, 0.9, 0.01), 2.0)
        assert abs(np.linalg.norm(w) - 1.0) < 1e-9


class TestDrop:
    def test_drop_at_default_lambda3(self):
        assert should_drop(entry(10, 0.2, 0.1), 0.25)

    def test_keep_high_mean(self):
        assert not should_drop(entry(10, 0.9, 0.1), 0.25)

    def test_vacant_center_dropped(self):
        assert should_drop(StatEntry(0, float("nan"), float("nan"), float("inf")), 0.25)

    def test_boundary_inclusive(self):
        assert should_drop(entry(5, 0.25, 0.0), 0.25)


class TestMergeCondition:
    def test_identical_weights_merge(self):
        w = np.array([1.0, 0.0])
        assert merge_condition(w, w, entry(5, 0.8, 0.05), entry(5, 0.8, 0.05), 3.0)

    def test_orthogonal_never_merge(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert not merge_condition(a, b, entry(5, 0.1, 0.0), entry(5, 0.0, 0.0), 3.0)

    def test_unsatisfiable_bound(self):
        w = np.array([1.0, 0.0])
        # mu + lambda4*sigma > 1 for both: cos <= 1 can never reach it
        assert not merge_condition(w, w * 2, entry(5, 0.9, 0.2), entry(5, 0.9, 0.2), 3.0)


class TestMergeGroups:
    def stats_for(self, bank, mu=0.8, sigma=0.01):
        return {c.uid: entry(5, mu, sigma) for _, c in bank.all_active()}

    def test_no_edges_no_change(self):
        bank = make_bank({0: [np.array([1.0, 0.0])], 1: [np.array([0.0, 1.0])]})
        lm = LabelMap(2, 4)
        events = merge_groups(bank, self.stats_for(bank), 3.0, lm)
        assert events == []
        assert lm.is_identity()

    def test_duplicate_classes_merge_to_lower_label(self):
        d = np.array([0.6, 0.8, 0.0])
        bank = make_bank({0: [d], 1: [d * 1.5], 2: [np.array([0.0, 0.0, 1.0])]})
        lm = LabelMap(3, 6)
        events = merge_groups(bank, self.stats_for(bank), 3.0, lm)
        assert len(events) == 1
        assert lm.mapping == {0: 0, 1: 0, 2: 2}
        assert bank.n_active(0) == 1 and bank.n_active(1) == 0

    def test_components_match_union_find_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            # 10 sub-centers, synthetic edges via controlled directions
            dirs = rng.standard_normal((10, 8))
            bank = make_bank({j: [dirs[j]] for j in range(10)})
            stats = {}
            for _, c in bank.all_active():
                mu = float(rng.uniform(0.0, 0.9))
                stats[c.uid] = entry(5, mu, 0.0)
            lm = LabelMap(10, 10)
            merge_groups(bank, stats, 3.0, lm)
            # oracle: networkx connected components on the same condition
            g = nx.Graph()
            g.add_nodes_from(range(10))
            nd = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
            for a in range(10):
                for b in range(a + 1, 10):
                    if np.dot(nd[a], nd[b]) >= max(stats[a].mu, stats[b].mu):
                        g.add_edge(a, b)
            for comp in nx.connected_components(g):
                targets = {lm.mapping[j] for j in comp}
                assert len(targets) == 1
                assert targets.pop() == min(comp)

    def test_order_invariance(self):
        rng = np.random.default_rng(13)
        dirs = rng.standard_normal((6, 5))
        stats_mu = rng.uniform(0.0, 0.9, 6)
        results = []
        for order in ([0, 1, 2, 3, 4, 5], [5, 3, 1, 0, 2, 4]):
            bank = SubCenterBank()
            uid_to_class = {}
            for j in order:
                sc = bank.add_center(j, dirs[j])
                uid_to_class[sc.uid] = j
            stats = {c.uid: entry(5, float(stats_mu[label]), 0.0)
                     for label, c in bank.all_active()}
            lm = LabelMap(6, 6)
            merge_groups(bank, stats, 3.0, lm)
            results.append(dict(lm.mapping))
        assert results[0] == results[1]

    def test_merged_weight_is_normalized_mean(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.8, 0.6])
        bank = make_bank({0: [a], 1: [b]})
        lm = LabelMap(2, 2)
        merge_groups(bank, {0: entry(5, 0.5, 0.0), 1: entry(5, 0.5, 0.0)}, 3.0, lm)
        new = bank.active_centers(0)[0].weight
        want = (a + b / np.linalg.norm(b)) / 2
        want /= np.linalg.norm(want)
        assert np.allclose(new, want, atol=1e-12)


class TestLabelMap:
    def test_idempotent(self):
        lm = LabelMap(5, 3)
        lm.relabel({2, 4}, 2)
        lm.relabel({0, 2}, 0)
        labels = np.array([0, 1, 2, 3, 4])
        once = lm.apply(labels)
        assert np.array_equal(once, lm.apply(once))
        assert lm.mapping[4] == 0  # chain fully resolved

    def test_dropped_monotone(self):
        lm = LabelMap(2, 10)
        lm.mark_dropped([1, 3])
        before = lm.dropped.copy()
        lm.mark_dropped([5])
        assert np.all(lm.dropped[before])


class TestUnionFind:
    def test_components(self):
        uf = UnionFind(range(6))
        uf.union(0, 1)
        uf.union(1, 2)
        uf.union(4, 5)
        assert uf.components() == [[0, 1, 2], [3], [4, 5]]


class TestEvolutionConfig:
    def test_defaults_match_reference_settings(self):
        cfg = EvolutionConfig()
        assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4) == (2.0, 2.0, 0.25, 3.0)
        assert cfg.m_init == 3

    def test_epsilon_bounds(self):
        with pytest.raises(ValueError):
            EvolutionConfig(epsilon_start=40, total_epochs=40)
