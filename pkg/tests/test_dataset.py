import numpy as np
import pytest

from famednet import dataset, files, haze
from famednet.dataset import DatasetManifest, SynthConfig, procedural_depth, synthesize_dataset
from famednet.metrics import quantize_depth
from photo_corpus import TRAIN_SOURCES, random_crops


@pytest.fixture
def clear_dir(tmp_path):
    d = tmp_path / "clear"
    for i, c in enumerate(random_crops(TRAIN_SOURCES, 6, 48, seed=9)):
        files.save_image(c, d / f"img{i}.png")
    return d


class TestProceduralDepth:
    def test_normalized_and_seeded(self):
        a = procedural_depth(40, 60, 3)
        assert a.min() == 0 and a.max() == pytest.approx(1.0)
        np.testing.assert_array_equal(a, procedural_depth(40, 60, 3))
        assert not np.array_equal(a, procedural_depth(40, 60, 4))

    def test_crops_span_several_depth_levels(self):
        rng = np.random.default_rng(0)
        spans = []
        for seed in range(20):
            q = quantize_depth(procedural_depth(256, 256, seed))
            for _ in range(10):
                y, x = rng.integers(0, 129, 2)
                spans.append(len(np.unique(q[y : y + 128, x : x + 128])))
        assert np.mean(np.array(spans) >= 3) >= 0.5


class TestSynthesis:
    def test_zero_beta_reproduces_clear(self, clear_dir, tmp_path):
        m = synthesize_dataset(clear_dir, SynthConfig(beta_range=(0, 0)), tmp_path / "out")
        for e in m.entries:
            np.testing.assert_array_equal(files.load_image(e.hazy), files.load_image(e.clear))

    def test_fixed_seed_is_reproducible(self, clear_dir, tmp_path):
        a = synthesize_dataset(clear_dir, SynthConfig(seed=5), tmp_path / "a")
        b = synthesize_dataset(clear_dir, SynthConfig(seed=5), tmp_path / "b")
        assert (tmp_path / "a" / "manifest.tsv").read_text() == (tmp_path / "b" / "manifest.tsv").read_text()
        for ea, eb in zip(a.entries, b.entries):
            assert ea.hazy.read_bytes() == eb.hazy.read_bytes()

    def test_parameters_in_range(self, clear_dir, tmp_path):
        m = synthesize_dataset(clear_dir, SynthConfig(beta_range=(0.6, 1.8), A_range=(0.7, 1.0)), tmp_path / "o")
        assert len(m.entries) == 6
        assert all(0.6 <= e.beta <= 1.8 and 0.7 <= e.A <= 1.0 for e in m.entries)

    def test_hazy_matches_model(self, clear_dir, tmp_path):
        m = synthesize_dataset(clear_dir, SynthConfig(seed=2), tmp_path / "o")
        e = m.entries[0]
        J = files.load_image(e.clear).astype(np.float64)
        t = haze.transmission_from_depth(dataset.depth_for_entry(e, J.shape[1:]), e.beta)
        expect = haze.synthesize_hazy(J, t, e.A)
        assert np.max(np.abs(files.load_image(e.hazy) - expect)) <= 1 / 510 + 1e-6

    def test_depth_dir_is_used(self, clear_dir, tmp_path):
        ddir = tmp_path / "depth"
        ddir.mkdir()
        np.save(ddir / "img0.npy", np.zeros((48, 48)))
        m = synthesize_dataset(clear_dir, SynthConfig(depth_dir=str(ddir)), tmp_path / "o")
        e = next(e for e in m.entries if e.clear.name == "img0.png")
        assert e.depth.endswith("img0.npy")
        np.testing.assert_array_equal(files.load_image(e.hazy), files.load_image(e.clear))

    def test_empty_dir_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError, match="no PNG"):
            synthesize_dataset(tmp_path / "empty", SynthConfig(), tmp_path / "o")

    @pytest.mark.parametrize(
        "kw", [dict(beta_range=(-1, 1)), dict(A_range=(0.5, 1.2)), dict(splits=(0, 0, 0))]
    )
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestManifest:
    def test_round_trip_and_disjoint_splits(self, clear_dir, tmp_path):
        m = synthesize_dataset(clear_dir, SynthConfig(splits=(0.5, 0.0, 0.5)), tmp_path / "o")
        back = DatasetManifest.load(tmp_path / "o" / "manifest.tsv")
        assert back.to_tsv() == m.to_tsv()
        train = {e.clear for e in back.split("train")}
        test = {e.clear for e in back.split("test")}
        assert len(train) == len(test) == 3 and not train & test
        hazy, clear = back.pairs("test")[0]
        assert hazy.shape == clear.shape == (3, 48, 48)

    def test_missing_file_rejected(self, clear_dir, tmp_path):
        m = synthesize_dataset(clear_dir, SynthConfig(), tmp_path / "o")
        m.entries[2].hazy.unlink()
        with pytest.raises(FileNotFoundError, match="manifest.tsv:4"):
            DatasetManifest.load(tmp_path / "o" / "manifest.tsv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\tb\n")
        with pytest.raises(ValueError, match="header"):
            DatasetManifest.load(tmp_path / "m.tsv")


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("FAMED_THREADS", "3")
    assert dataset.worker_count() == 3
    monkeypatch.setenv("FAMED_THREADS", "zero")
    assert dataset.worker_count() == 1
