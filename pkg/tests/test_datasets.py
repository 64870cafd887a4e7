import numpy as np
import pytest
from PIL import Image as PILImage
from scipy import stats

from viewmi.datasets import (
    FactorSpec,
    MovingDigitWorld,
    MovingMNISTConfig,
    SampleLabels,
    load_labeled_images,
    load_sequence_dataset,
    render_glyph,
    save_sequence_dataset,
    synth_sequence,
)
from viewmi.toydata import (
    mosaic_image,
    planted_channel_set,
    sample_patch_probe_set,
    textured_class_set,
)

CFG = MovingMNISTConfig(t=20, k=10)


@pytest.fixture(scope="module")
def world():
    return MovingDigitWorld(CFG)


class TestConfig:
    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            MovingMNISTConfig(digit=80)
        with pytest.raises(ValueError):
            MovingMNISTConfig(k=20, t=20)
        with pytest.raises(ValueError):
            MovingMNISTConfig(n_classes=1)

    def test_speed_is_canvas_fraction(self):
        assert CFG.speed == pytest.approx(6.4)

    def test_factor_spec_validation(self):
        FactorSpec(frozenset({"digit", "position"}))
        with pytest.raises(ValueError):
            FactorSpec(frozenset({"digit", "texture"}))

    def test_labels_inside_canvas(self):
        with pytest.raises(ValueError):
            SampleLabels(3, (70.0, 10.0), 2)


class TestSynthSequence:
    def test_shapes_and_range(self, world):
        seq, labels = world.synth_sequence(np.random.default_rng(0))
        assert seq.frames.shape == (20, 3, 64, 64)
        assert seq.frames.dtype == np.float32
        assert 0.0 <= seq.frames.min() and seq.frames.max() <= 1.0
        assert 0 <= labels.digit_class < 10 and 0 <= labels.background_class < 10

    def test_deterministic_given_seed(self):
        # fresh world + fresh rng twice: bit-identical output
        a = MovingDigitWorld(CFG).synth_sequence(np.random.default_rng(7))[0]
        b = MovingDigitWorld(CFG).synth_sequence(np.random.default_rng(7))[0]
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_displacement_magnitude_equals_speed_off_reflections(self, world):
        for seed in range(30):
            seq, _ = world.synth_sequence(np.random.default_rng(seed))
            deltas = np.linalg.norm(np.diff(seq.positions, axis=0), axis=1)
            free = ~seq.reflected[1:]
            assert free.any()
            np.testing.assert_allclose(deltas[free], CFG.speed, atol=1e-9)

    def test_bbox_never_exits_canvas(self, world):
        limit = CFG.canvas - CFG.digit
        for seed in range(30):
            seq, _ = world.synth_sequence(np.random.default_rng(seed))
            assert seq.positions.min() >= 0.0
            assert seq.positions.max() <= limit + 1e-12

    def test_reflections_do_happen(self, world):
        hits = sum(
            world.synth_sequence(np.random.default_rng(s))[0].reflected.any() for s in range(20)
        )
        assert hits >= 10  # 19 steps of 6.4 px cross a 36 px box most of the time

    def test_zero_velocity_hook_freezes_position(self, world):
        seq, _ = world.synth_sequence(np.random.default_rng(3), velocity=(0.0, 0.0))
        assert np.all(seq.positions == seq.positions[0])
        np.testing.assert_array_equal(seq.frames[0], seq.frames[-1])

    def test_background_fixed_across_frames(self, world):
        seq, _ = world.synth_sequence(np.random.default_rng(11))
        # digit occupies at most 28x28; some corner pixels stay pure background
        corner = seq.frames[:, :, :4, :4]
        assert np.all(corner == corner[0]) or np.all(seq.frames[:, :, -4:, -4:] == seq.frames[0, :, -4:, -4:])

    def test_labels_read_at_final_frame(self, world):
        seq, labels = world.synth_sequence(np.random.default_rng(5))
        half = (CFG.digit - 1) / 2
        assert labels.position[0] == pytest.approx(seq.positions[-1][1] + half)
        assert labels.position[1] == pytest.approx(seq.positions[-1][0] + half)

    def test_module_level_wrapper(self):
        seq, labels = synth_sequence(CFG, np.random.default_rng(0))
        assert seq.frames.shape[0] == CFG.t


class TestFactorPair:
    def test_v1_is_first_k_frames(self, world):
        rng = np.random.default_rng(0)
        seq, labels = world.synth_sequence(rng)
        pair = world.make_factor_pair(seq, labels, FactorSpec(frozenset({"digit"})), rng)
        assert pair.v1.shape == (CFG.k, 3, 64, 64)
        np.testing.assert_array_equal(pair.v1, seq.frames[: CFG.k])
        assert pair.v2.shape == (3, 64, 64)

    def test_shared_factors_copied(self, world):
        rng = np.random.default_rng(1)
        seq, labels = world.synth_sequence(rng)
        spec = FactorSpec(frozenset({"digit", "position", "background"}))
        pair = world.make_factor_pair(seq, labels, spec, rng)
        # everything shared: v2 must exactly reproduce frame t
        np.testing.assert_array_equal(pair.v2, seq.frames[-1])
        assert pair.v2_labels == labels

    def test_unshared_classes_always_differ(self, world):
        rng = np.random.default_rng(2)
        for _ in range(50):
            seq, labels = world.synth_sequence(rng)
            pair = world.make_factor_pair(seq, labels, FactorSpec(frozenset()), rng)
            assert pair.v2_labels.digit_class != labels.digit_class
            assert pair.v2_labels.background_class != labels.background_class

    def test_shared_background_reuses_crop(self, world):
        rng = np.random.default_rng(3)
        seq, labels = world.synth_sequence(rng)
        pair = world.make_factor_pair(seq, labels, FactorSpec(frozenset({"background"})), rng)
        assert pair.v2_labels.background_class == labels.background_class
        # digit and position were redrawn but background pixels outside both
        # digit boxes must match frame t exactly
        mask = np.ones((64, 64), dtype=bool)
        for lab in (labels, pair.v2_labels):
            x, y = lab.position
            y0, x0 = int(round(y - 13.5)), int(round(x - 13.5))
            mask[max(y0, 0) : y0 + 28, max(x0, 0) : x0 + 28] = False
        if mask.any():
            np.testing.assert_array_equal(pair.v2[:, mask], seq.frames[-1][:, mask])

    def test_redraw_conditionally_uniform(self, world):
        # unshared background: redraw should be uniform over the other 9
        # classes given each original class (chi-square per original class)
        rng = np.random.default_rng(4)
        seq, labels = world.synth_sequence(rng)
        spec = FactorSpec(frozenset({"digit", "position"}))
        counts = np.zeros((10, 10), dtype=np.int64)
        for _ in range(1000):
            pair = world.make_factor_pair(seq, labels, spec, rng)
            counts[labels.background_class, pair.v2_labels.background_class] += 1
        orig = labels.background_class
        assert counts[orig, orig] == 0
        observed = np.delete(counts[orig], orig)
        p = stats.chisquare(observed).pvalue
        assert p > 0.01

    def test_pair_determinism(self):
        def run():
            w = MovingDigitWorld(CFG)
            rng = np.random.default_rng(9)
            seq, labels = w.synth_sequence(rng)
            return w.make_factor_pair(seq, labels, FactorSpec(frozenset({"position"})), rng)

        a, b = run(), run()
        np.testing.assert_array_equal(a.v2, b.v2)
        assert a.v2_labels == b.v2_labels


class TestGlyphsAndTextures:
    def test_glyphs_distinct(self):
        rng = np.random.default_rng(0)
        masks = [render_glyph(d, np.random.default_rng(0)) for d in range(10)]
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.abs(masks[i] - masks[j]).mean() > 0.01

    def test_glyph_range_and_shape(self):
        g = render_glyph(4, np.random.default_rng(1))
        assert g.shape == (28, 28)
        assert g.min() >= 0.0 and g.max() <= 1.0 and g.max() > 0.5

    def test_mosaic_field_is_sticky(self):
        _, field = mosaic_image(np.random.default_rng(0), size=224, cell=32)
        same = np.mean(field[:, :-1] == field[:, 1:])
        assert same > 0.5

    def test_mosaic_rejects_bad_cell(self):
        with pytest.raises(ValueError):
            mosaic_image(np.random.default_rng(0), size=100, cell=32)

    def test_probe_patches_labeled(self):
        x, y = sample_patch_probe_set(np.random.default_rng(0), 32)
        assert x.shape == (32, 3, 32, 32) and y.shape == (32,)

    def test_textured_class_set(self):
        x, y = textured_class_set(np.random.default_rng(0), 16)
        assert x.shape == (16, 3, 32, 32)
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_planted_channels_share_patterns(self):
        xa, ya, pats = planted_channel_set(np.random.default_rng(0), 64)
        xb, yb, _ = planted_channel_set(np.random.default_rng(1), 64, patterns=pats)
        assert xa.shape == (64, 3, 8, 8)
        # same rng twice reproduces exactly
        xc, yc, _ = planted_channel_set(np.random.default_rng(0), 64)
        np.testing.assert_array_equal(xa, xc)
        np.testing.assert_array_equal(ya, yc)


class TestManifest:
    def _write_images(self, tmp_path, names):
        for name in names:
            arr = (np.random.default_rng(len(name)).random((8, 8, 3)) * 255).astype(np.uint8)
            PILImage.fromarray(arr).save(tmp_path / name)

    def test_load_with_unlabeled_rows(self, tmp_path):
        self._write_images(tmp_path, ["a.png", "b.png", "c.png"])
        (tmp_path / "manifest.csv").write_text("a.png,cat\nb.png,\nc.png,dog\n")
        ds = load_labeled_images(tmp_path / "manifest.csv")
        assert len(ds) == 3
        assert ds.class_names == ["cat", "dog"]
        assert ds.per_class_counts == {"cat": 1, "dog": 1}
        assert list(ds.labels) == [0, -1, 1]
        assert len(ds.labeled) == 2 and len(ds.unlabeled) == 1

    def test_load_array_shape(self, tmp_path):
        self._write_images(tmp_path, ["a.png"])
        (tmp_path / "m.csv").write_text("a.png,x\n")
        arr = load_labeled_images(tmp_path / "m.csv").load_array()
        assert arr.shape == (1, 3, 8, 8)
        assert arr.dtype == np.float32 and arr.max() <= 1.0

    def test_missing_file_reports_row(self, tmp_path):
        (tmp_path / "m.csv").write_text("ghost.png,x\n")
        with pytest.raises(ValueError, match="row 0"):
            load_labeled_images(tmp_path / "m.csv")

    def test_malformed_row_reports_index(self, tmp_path):
        self._write_images(tmp_path, ["a.png"])
        (tmp_path / "m.csv").write_text("a.png,x\nb.png,1,extra\n")
        with pytest.raises(ValueError, match="row 1"):
            load_labeled_images(tmp_path / "m.csv")

    def test_split_partitions(self, tmp_path):
        self._write_images(tmp_path, [f"{i}.png" for i in range(10)])
        (tmp_path / "m.csv").write_text("".join(f"{i}.png,c{i % 2}\n" for i in range(10)))
        ds = load_labeled_images(tmp_path / "m.csv")
        tr, te = ds.split(0.7, seed=0)
        assert len(tr) == 7 and len(te) == 3
        assert set(map(str, tr.paths)) | set(map(str, te.paths)) == set(map(str, ds.paths))


class TestContainer:
    def test_round_trip(self, tmp_path):
        frames = (np.random.default_rng(0).random((7, 4, 3, 16, 16)) * 255).astype(np.uint8)
        labels = {"digit_class": np.arange(7), "position": np.zeros((7, 2))}
        save_sequence_dataset(tmp_path / "ds", frames, labels, CFG, chunk_bytes=4096)
        loaded, lab, meta = load_sequence_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(loaded, frames)
        np.testing.assert_array_equal(lab["digit_class"], labels["digit_class"])
        assert len(meta["chunks"]) > 1  # chunk_bytes forced a split
        assert meta["config"]["canvas"] == 64

    def test_truncated_payload_rejected(self, tmp_path):
        frames = np.zeros((4, 2, 3, 8, 8), dtype=np.uint8)
        save_sequence_dataset(tmp_path / "ds", frames, {}, None, chunk_bytes=100)
        victim = sorted((tmp_path / "ds").glob("chunk_*.bin"))[-1]
        victim.unlink()
        import json

        meta_path = tmp_path / "ds" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["chunks"] = meta["chunks"][:-1]
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValueError):
            load_sequence_dataset(tmp_path / "ds")
