import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densal.acquisition import (
    AcquisitionError,
    GlobalStats,
    RegionStats,
    global_reduce,
    naive_total_distance,
    read_globals,
    read_scores_csv,
    read_stats_jsonl,
    region_stats,
    score,
    write_globals,
    write_scores_csv,
    write_stats_jsonl,
)


def random_regions(rng, count, dim=4, max_pixels=30):
    out = []
    for rid in range(count):
        n = int(rng.integers(1, max_pixels))
        z = rng.normal(loc=rng.normal(size=dim), size=(n, dim))
        u = rng.random(n)
        out.append((rid, z, u))
    return out


def stats_of(regions, shard_of=lambda rid: 0):
    return [region_stats(rid, z, u, shard_id=shard_of(rid)) for rid, z, u in regions]


class TestRegionStats:
    def test_one_dimensional_example(self):
        st_ = region_stats(0, [[0.0], [2.0]], [0.1, 0.3])
        assert st_.n == 2
        assert st_.v.tolist() == [2.0]
        assert st_.w == 4.0
        assert st_.s == pytest.approx(0.4, abs=1e-15)

    def test_empty_region_dropped(self, caplog):
        assert region_stats(3, np.zeros((0, 2)), np.zeros(0)) is None
        z = np.ones((4, 2))
        assert region_stats(3, z, np.ones(4), valid=np.zeros(4, bool)) is None

    def test_matches_naive_loop(self, rng):
        z = rng.normal(size=(50, 6))
        u = rng.random(50)
        st_ = region_stats(1, z, u)
        v = [0.0] * 6
        w = 0.0
        s = 0.0
        for i in range(50):
            for k in range(6):
                v[k] += z[i, k]
                w += z[i, k] ** 2
            s += u[i]
        np.testing.assert_allclose(st_.v, v, rtol=1e-12)
        assert st_.w == pytest.approx(w, rel=1e-12)
        assert st_.s == pytest.approx(s, rel=1e-12)

    def test_valid_mask(self):
        z = np.arange(8.0).reshape(4, 2)
        st_ = region_stats(0, z, np.ones(4), valid=[True, False, True, False])
        assert st_.n == 2
        assert st_.v.tolist() == [4.0, 6.0]

    def test_shape_mismatch(self):
        with pytest.raises(AcquisitionError):
            region_stats(0, np.zeros((3, 2)), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 8))
    def test_cauchy_schwarz(self, seed, n, d):
        z = np.random.default_rng(seed).normal(size=(n, d)) * 100
        st_ = region_stats(0, z, np.zeros(n))
        assert st_.w >= float(st_.v @ st_.v) / n * (1 - 1e-12)


class TestGlobalReduce:
    def test_one_dimensional_example(self):
        g = global_reduce([region_stats(0, [[0.0], [2.0]], [0.1, 0.3])])
        assert g.N == 2 and g.mu.tolist() == [1.0]
        assert g.D[0] == 2.0 and g.sum_d == 2.0

    def test_identical_embeddings(self):
        z = np.tile([1.5, -2.0], (5, 1))
        g = global_reduce([region_stats(i, z, np.ones(5)) for i in range(3)])
        assert g.sum_d == 0.0

    def test_d_matches_naive_loop(self, rng):
        regions = random_regions(rng, 20, dim=5)
        g = global_reduce(stats_of(regions))
        for rid, z, _ in regions:
            assert g.D[rid] == pytest.approx(naive_total_distance(z, g.mu), rel=1e-9)

    def test_uses_region_count_not_global_count(self):
        # the per-region term must scale with n_q; with N it would not match
        a = region_stats(0, [[0.0]], [1.0])
        b = region_stats(1, [[2.0], [4.0], [6.0]], [1.0, 1.0, 1.0])
        g = global_reduce([a, b])
        assert g.mu.tolist() == [3.0]
        assert g.D[0] == 9.0
        assert g.D[1] == 11.0

    def test_reshard_equivalence(self, rng):
        regions = random_regions(rng, 1000)
        single = global_reduce(stats_of(regions))
        sharded = stats_of(regions, shard_of=lambda rid: rid % 7)
        shards = [[s for s in sharded if s.shard_id == k] for k in range(7)]
        rng.shuffle(shards)
        multi = global_reduce([s for shard in shards for s in reversed(shard)])
        assert multi.N == single.N
        np.testing.assert_allclose(multi.mu, single.mu, rtol=1e-9)
        assert multi.sum_d == pytest.approx(single.sum_d, rel=1e-9)
        assert multi.sum_s == pytest.approx(single.sum_s, rel=1e-9)
        a = {s.region_id: s.g for s in score(stats_of(regions), single)}
        b = {s.region_id: s.g for s in score(sharded, multi)}
        assert all(a[k] == pytest.approx(b[k], rel=1e-9) for k in a)

    def test_empty_and_zero_rejected(self):
        with pytest.raises(AcquisitionError):
            global_reduce([])
        with pytest.raises(AcquisitionError):
            global_reduce([RegionStats(0, 0, np.zeros(2), 0.0, 0.0)])

    def test_duplicate_ids_rejected(self):
        st_ = region_stats(4, [[1.0]], [1.0])
        with pytest.raises(AcquisitionError, match="duplicate"):
            global_reduce([st_, st_])


class TestScore:
    def make(self, s_vals, d_vals):
        stats = [RegionStats(i, 1, np.zeros(1), 0.0, s) for i, s in enumerate(s_vals)]
        g = GlobalStats(len(s_vals), np.zeros(1), math.fsum(s_vals), math.fsum(d_vals), dict(enumerate(d_vals)))
        return stats, g

    def test_two_regions(self):
        sc = score(*self.make([1.0, 3.0], [2.0, 2.0]))
        assert [x.g for x in sc] == [0.75, 1.25]
        assert sum(x.g for x in sc) == 2.0

    def test_single_region(self):
        sc = score(*self.make([0.7], [3.0]))
        assert sc[0].g == 2.0

    def test_random_regions_normalize(self, rng):
        regions = random_regions(rng, 500)
        stats = stats_of(regions)
        sc = score(stats, global_reduce(stats))
        assert math.fsum(x.uncertainty_term for x in sc) == pytest.approx(1.0, abs=1e-9)
        assert math.fsum(x.diversity_term for x in sc) == pytest.approx(1.0, abs=1e-9)
        assert all(x.uncertainty_term >= 0 and x.diversity_term >= 0 for x in sc)

    def test_degenerate_uncertainty_uniform(self, caplog):
        sc = score(*self.make([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 2.0, 0.0]))
        assert [x.uncertainty_term for x in sc] == [0.25] * 4
        assert "uniform" in caplog.text

    def test_degenerate_diversity_uniform(self):
        sc = score(*self.make([1.0, 1.0], [0.0, 0.0]))
        assert [x.diversity_term for x in sc] == [0.5, 0.5]

    @pytest.mark.parametrize("c", [1e-6, 0.3, 7.0, 1e8])
    def test_uncertainty_scale_invariance(self, rng, c):
        regions = random_regions(rng, 40)
        base = score(stats_of(regions), global_reduce(stats_of(regions)))
        scaled_regions = [(rid, z, u * c) for rid, z, u in regions]
        scaled = score(stats_of(scaled_regions), global_reduce(stats_of(scaled_regions)))
        for a, b in zip(base, scaled):
            assert b.uncertainty_term == pytest.approx(a.uncertainty_term, rel=1e-12)
            assert b.g == pytest.approx(a.g, rel=1e-12)

    def test_unknown_region_rejected(self):
        stats, g = self.make([1.0], [1.0])
        with pytest.raises(AcquisitionError):
            score([RegionStats(9, 1, np.zeros(1), 0.0, 1.0)], g)


class TestInterchange:
    def test_stats_jsonl_roundtrip(self, tmp_path, rng):
        stats = stats_of(random_regions(rng, 5), shard_of=lambda r: r % 2)
        write_stats_jsonl(tmp_path / "s.jsonl", stats)
        back = read_stats_jsonl(tmp_path / "s.jsonl")
        for a, b in zip(stats, back):
            assert (a.region_id, a.n, a.w, a.s, a.shard_id) == (b.region_id, b.n, b.w, b.s, b.shard_id)
            assert np.array_equal(a.v, b.v)

    def test_bad_record_reports_line(self, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"region_id": 1, "n": 1, "v": [0], "w": 0, "s": 0}\n{"n": 2}\n')
        with pytest.raises(AcquisitionError, match=":2:"):
            read_stats_jsonl(tmp_path / "s.jsonl")

    def test_globals_and_scores_roundtrip(self, tmp_path, rng):
        stats = stats_of(random_regions(rng, 6))
        g = global_reduce(stats)
        write_globals(tmp_path / "g.json", g)
        g2 = read_globals(tmp_path / "g.json")
        assert g2.N == g.N and g2.D == g.D and np.array_equal(g2.mu, g.mu)
        sc = score(stats, g)
        write_scores_csv(tmp_path / "s.csv", sc)
        header = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert header == "region_id,uncertainty_term,diversity_term,g"
        back = read_scores_csv(tmp_path / "s.csv")
        assert [x.g for x in back] == [x.g for x in sc]
