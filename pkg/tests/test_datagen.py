import json

import numpy as np
import pytest

from cu_lab import datagen
from cu_lab.errors import ConfigError, DefinitenessError, ParseError, ValidationError


def small_toy(**kw):
    kw.setdefault("counts", (100, 20, 20))
    return datagen.gen_toy(datagen.SyntheticSpec(**kw))


class TestToy:
    def test_default_sizes(self):
        spec = datagen.SyntheticSpec()
        assert spec.counts == (36000, 7000, 7000)
        assert (spec.m, spec.timestamps, spec.dims) == (4, 50, 2)

    def test_shapes_and_counts(self):
        d = small_toy()
        assert {k: len(v) for k, v in d.items()} == {"train": 100, "val": 20, "test": 20}
        inst = d["train"][0]
        assert inst.past.shape == (100, 4) and inst.future.shape == (100, 4)
        assert inst.gt_sigma.shape == (4, 4) and inst.gt_lambda == 1.0

    def test_non_pd_sigma_rejected(self):
        with pytest.raises(DefinitenessError):
            datagen.SyntheticSpec(sigma_gt=np.zeros((4, 4)))

    def test_default_sigma_eigenvalues(self):
        eig = np.linalg.eigvalsh(datagen.SyntheticSpec(seed=5).sigma_gt)
        assert eig.min() >= 0.3 - 1e-9 and eig.max() <= 2.0 + 1e-9
        np.testing.assert_allclose(np.diag(datagen.SyntheticSpec(seed=5).sigma_gt), 1.0)

    def test_means_are_straight_lines(self):
        d = small_toy()["train"]
        pts = d.gt_mean.reshape(len(d), 50, 2, 4)
        step = np.diff(pts, axis=1)
        np.testing.assert_allclose(step, np.broadcast_to(step[:, :1], step.shape), atol=1e-12)
        speed = np.linalg.norm(step[:, 0], axis=1)
        assert speed.min() >= 0.1 and speed.max() <= 1.0

    def test_noise_covariance(self):
        spec = datagen.SyntheticSpec(counts=(10_000, 10, 10), seed=2, lambda_gt=1.5)
        d = datagen.gen_toy(spec)["train"]
        noise = (d.past - d.gt_mean).reshape(-1, 4)
        target = spec.lambda_gt * spec.sigma_gt
        assert np.max(np.abs(np.cov(noise.T) - target)) < 0.05 * np.max(np.abs(target))

    def test_determinism(self):
        assert small_toy(seed=3)["val"] == small_toy(seed=3)["val"]
        assert small_toy(seed=3)["val"] != small_toy(seed=4)["val"]

    @pytest.mark.parametrize("phi_per,lo,hi", [("instance", 0.7, 1.3), ("slice", 0.0, 0.3)])
    def test_mixing_granularity(self, phi_per, lo, hi):
        # mean whitened energy per instance is ~Exp(1) with one mixing draw
        # per instance, and concentrated near 1 with one draw per slice
        spec = datagen.SyntheticSpec(counts=(400, 5, 5), seed=6, phi_per=phi_per)
        d = datagen.gen_toy(spec)["train"]
        white = np.linalg.solve(np.linalg.cholesky(spec.sigma_gt), (d.past - d.gt_mean).reshape(-1, 4).T)
        energy = (white ** 2).sum(axis=0).reshape(400, 100).mean(axis=1) / 4
        assert lo < energy.std() < hi

    def test_shuffled_order_conjugates_sigma(self):
        spec = datagen.SyntheticSpec(counts=(50, 5, 5), seed=1, agent_order="shuffled")
        d = datagen.gen_toy(spec)["train"]
        for s in d.gt_sigma:
            assert sorted(np.round(np.linalg.eigvalsh(s), 10)) == sorted(np.round(np.linalg.eigvalsh(spec.sigma_gt), 10))
        assert any(not np.array_equal(s, spec.sigma_gt) for s in d.gt_sigma)

    @pytest.mark.parametrize("kw", [{"counts": (0, 1, 1)}, {"phi_per": "agent"}, {"lambda_gt": 0.0}, {"dims": 3}])
    def test_bad_spec(self, kw):
        with pytest.raises(ConfigError):
            datagen.SyntheticSpec(**kw)


class TestScenes:
    def test_archetypes_below_two(self):
        with pytest.raises(ConfigError):
            datagen.SceneSpec(archetypes=1)

    def test_full_coupling(self):
        d = datagen.gen_scenes(datagen.SceneSpec(archetypes=2, coupling=1.0, counts=(200, 10, 10)))["train"]
        assert np.all(d.labels == d.labels[:, :1])

    def test_no_coupling_uncorrelated(self):
        n = 4000
        d = datagen.gen_scenes(datagen.SceneSpec(archetypes=2, coupling=0.0, counts=(n, 10, 10), seed=3))["train"]
        r = np.corrcoef(d.labels[:, 0], d.labels[:, 1])[0, 1]
        assert abs(r) < 3 / np.sqrt(n)

    def test_determinism_bytes(self, tmp_path):
        spec = datagen.SceneSpec(counts=(30, 5, 5), seed=9)
        a = datagen.save_splits(datagen.gen_scenes(spec), tmp_path / "a")
        b = datagen.save_splits(datagen.gen_scenes(spec), tmp_path / "b")
        for k in a:
            assert a[k].read_bytes() == b[k].read_bytes()

    def test_shapes(self):
        spec = datagen.SceneSpec(counts=(7, 3, 3), t_minus=6, t_plus=9, m=3)
        d = datagen.gen_scenes(spec)["test"]
        assert d.past.shape == (3, 12, 3) and d.future.shape == (3, 18, 3) and not d.synthetic

    def test_futures_differ_by_archetype(self):
        spec = datagen.SceneSpec(counts=(400, 5, 5), noise=0.0, coupling=0.0, archetypes=4)
        d = datagen.gen_scenes(spec)["train"]
        end = d.future.reshape(400, spec.t_plus, 2, spec.m)[:, -1]
        start = d.past.reshape(400, spec.t_minus, 2, spec.m)[:, -1]
        travel = np.linalg.norm(end - start, axis=1)
        stop = travel[d.labels == datagen.STOP].mean()
        straight = travel[d.labels == datagen.STRAIGHT].mean()
        assert stop < 0.5 * straight


class TestSerialization:
    def test_round_trip(self, tmp_path):
        d = small_toy()["train"]
        datagen.save(d, tmp_path / "d.jsonl")
        back = datagen.load(tmp_path / "d.jsonl")
        assert back == d
        assert back.past.tobytes() == d.past.tobytes()

    def test_round_trip_scenes(self, tmp_path):
        d = datagen.gen_scenes(datagen.SceneSpec(counts=(20, 5, 5)))["train"]
        datagen.save(d, tmp_path / "s.jsonl")
        assert datagen.load(tmp_path / "s.jsonl") == d

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        datagen.save(small_toy()["val"], path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ParseError, match="line"):
            datagen.load(path)

    def test_missing_records(self, tmp_path):
        path = tmp_path / "d.jsonl"
        datagen.save(small_toy()["val"], path)
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:-3]))
        with pytest.raises(ParseError, match="declares 20"):
            datagen.load(path)

    def test_extent_mismatch(self, tmp_path):
        path = tmp_path / "d.jsonl"
        datagen.save(small_toy()["val"], path)
        lines = path.read_text().splitlines(keepends=True)
        rec = json.loads(lines[3])
        rec["past"] = rec["past"][:-4]  # 99 rows where 100 are declared
        lines[3] = json.dumps(rec) + "\n"
        path.write_text("".join(lines))
        with pytest.raises(ValidationError, match="line 4"):
            datagen.load(path)

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("not json\n")
        with pytest.raises(ParseError, match="line 1"):
            datagen.load(path)

    def test_header_format(self, tmp_path):
        path = tmp_path / "d.jsonl"
        datagen.save(small_toy()["val"], path)
        header = json.loads(path.read_text().splitlines()[0])
        assert {k: header[k] for k in ("version", "m", "t_minus", "t_plus", "count")} == \
            {"version": 1, "m": 4, "t_minus": 50, "t_plus": 50, "count": 20}

    def test_subset(self):
        d = small_toy()["train"]
        s = d.subset([3, 1])
        assert s.ids == [d.ids[3], d.ids[1]]
        np.testing.assert_array_equal(s.future[0], d.future[3])
