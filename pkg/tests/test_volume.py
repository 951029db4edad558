import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpvd.errors import DimsMismatchError, ManifestError, MissingFileError
from hpvd.geometry import Box3
from hpvd.volume import (Phase, PhaseNormalizer, PhaseStats, Study, Volume, compute_phase_stats,
                         crop_random, crop_window, denormalize, load_study, load_volume, normalize,
                         parse_phases, phases_label, resample, save_study, save_volume,
                         sliding_windows, stitch)

from conftest import LesionAnnotation, make_study


class TestPhase:
    def test_canonical_order(self):
        assert parse_phases("VP,nc, AP") == (Phase.NC, Phase.AP, Phase.VP)
        assert phases_label(parse_phases("DP,NC")) == "NC+DP"

    def test_duplicates_collapse(self):
        assert parse_phases(["VP", "VP"]) == (Phase.VP,)

    @pytest.mark.parametrize("bad", ["", "NC,XX", ","])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            parse_phases(bad)


class TestStudyInvariants:
    def test_dims_mismatch(self):
        with pytest.raises(DimsMismatchError):
            make_study({"NC": np.zeros((2, 3, 4)), "VP": np.zeros((2, 3, 5))})

    def test_mask_mismatch(self):
        with pytest.raises(DimsMismatchError):
            make_study({"NC": np.zeros((2, 3, 4))}, mask=np.zeros((2, 3, 3)))

    def test_phases_sorted(self):
        s = make_study({"VP": np.zeros((2, 2, 2)), "NC": np.zeros((2, 2, 2))})
        assert s.phases == (Phase.NC, Phase.VP)
        assert s.dims == (2, 2, 2)

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ValueError):
            PhaseStats({"NC": 0.0}, {"NC": 0.0})


class TestFileIO:
    def test_volume_roundtrip_f32(self, tmp_path):
        data = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 4
        save_volume(Volume(data, (0.5, 0.7, 2.0), "AP"), tmp_path / "v.json", dtype="f32le")
        meta = json.loads((tmp_path / "v.json").read_text())
        assert meta["dims"] == [4, 3, 2]
        assert meta["dtype"] == "f32le"
        raw = np.frombuffer((tmp_path / meta["data_file"]).read_bytes(), dtype="<f4")
        # x varies fastest on disk
        assert raw[:4].tolist() == [0.0, 0.25, 0.5, 0.75]
        back = load_volume(tmp_path / "v.json")
        np.testing.assert_array_equal(back.data, data)
        assert back.spacing == (0.5, 0.7, 2.0) and back.phase == Phase.AP

    def test_int16_refuses_lossy(self, tmp_path):
        with pytest.raises(ValueError):
            save_volume(Volume(np.full((1, 1, 2), 0.5)), tmp_path / "v.json")

    def test_two_phase_manifest(self, tmp_path):
        s = make_study({"NC": np.ones((2, 3, 4)), "VP": np.zeros((2, 3, 4))},
                       lesions=[LesionAnnotation(Box3(0, 0, 0, 2, 2, 1), "HCC")])
        save_study(s, tmp_path)
        back = load_study(tmp_path)
        assert back.phases == (Phase.NC, Phase.VP)
        assert back.lesions[0].box == Box3(0, 0, 0, 2, 2, 1)

    def test_phantom_roundtrip_bit_identical(self, phantom_study, tmp_path):
        save_study(phantom_study, tmp_path / "s")
        back = load_study(tmp_path / "s")
        for p in phantom_study.phases:
            np.testing.assert_array_equal(back.volumes[p].data, phantom_study.volumes[p].data)
        np.testing.assert_array_equal(back.liver_mask, phantom_study.liver_mask)
        assert [(l.kind, l.box) for l in back.lesions] == [(l.kind, l.box) for l in phantom_study.lesions]

    def test_missing_phase_file(self, phantom_study, tmp_path):
        save_study(phantom_study, tmp_path)
        (tmp_path / "AP.raw").unlink()
        with pytest.raises(MissingFileError) as err:
            load_study(tmp_path)
        assert err.value.code == "missing_file"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_study(tmp_path)

    def test_dims_mismatch_on_load(self, phantom_study, tmp_path):
        save_study(phantom_study, tmp_path)
        meta = json.loads((tmp_path / "DP.json").read_text())
        meta["dims"] = [meta["dims"][0] * 2, meta["dims"][1], meta["dims"][2] // 2]
        (tmp_path / "DP.json").write_text(json.dumps(meta))
        with pytest.raises(DimsMismatchError) as err:
            load_study(tmp_path)
        assert err.value.code == "dims_mismatch"

    @pytest.mark.parametrize("content", ["{not json", '{"phases": {}}', '{"id": "x", "phases": {"XX": "a"}}'])
    def test_malformed_manifest(self, tmp_path, content):
        (tmp_path / "manifest.json").write_text(content)
        with pytest.raises(ManifestError) as err:
            load_study(tmp_path)
        assert err.value.code == "malformed_manifest"

    def test_error_codes_distinct(self):
        codes = {MissingFileError.code, DimsMismatchError.code, ManifestError.code}
        assert len(codes) == 3


class TestResample:
    def test_identity(self, rng):
        v = Volume(rng.normal(size=(4, 5, 6)), (1.0, 1.0, 5.0))
        out = resample(v, (1.0, 1.0, 5.0))
        np.testing.assert_array_equal(out.data, v.data)

    @pytest.mark.parametrize("mode", ["trilinear", "cubic"])
    @pytest.mark.parametrize("target", [(0.5, 0.5, 2.5), (2.0, 1.5, 7.0), (0.7, 1.3, 1.0)])
    def test_constant(self, mode, target):
        v = Volume(np.full((6, 7, 8), 42.5), (1.0, 1.0, 5.0))
        out = resample(v, target, mode)
        np.testing.assert_allclose(out.data, 42.5, atol=1e-9)

    def test_output_dims(self):
        v = Volume(np.zeros((10, 20, 30)), (0.8, 0.8, 2.5))
        out = resample(v, (1.0, 1.0, 5.0))
        assert out.dims == (24, 16, 5)

    def test_linear_field_half_spacing(self):
        nx, ny, nz = 8, 7, 6
        z, y, x = np.meshgrid(np.arange(nz) + 0.5, np.arange(ny) + 0.5, np.arange(nx) + 0.5, indexing="ij")
        v = Volume(2 * x + 3 * y + z, (1.0, 1.0, 1.0))
        out = resample(v, (0.5, 0.5, 0.5), "trilinear")
        # sample centers in input-voxel units
        zo, yo, xo = np.meshgrid((np.arange(2 * nz) + 0.5) / 2, (np.arange(2 * ny) + 0.5) / 2,
                                 (np.arange(2 * nx) + 0.5) / 2, indexing="ij")
        expected = 2 * xo + 3 * yo + zo
        interior = (slice(1, -1),) * 3
        assert np.max(np.abs(out.data[interior] - expected[interior])) < 1e-6

    def test_cubic_reproduces_quadratic_interior(self):
        x = np.arange(20) + 0.5
        v = Volume(np.broadcast_to(x ** 2, (3, 3, 20)).copy(), (1.0, 1.0, 1.0))
        out = resample(v, (0.5, 1.0, 1.0), "cubic")
        xo = (np.arange(40) + 0.5) / 2
        # Keys a=-0.5 is exact for quadratics away from the clamped edges
        np.testing.assert_allclose(out.data[1, 1, 4:-4], xo[4:-4] ** 2, atol=1e-9)

    @pytest.mark.parametrize("bad", [(0, 1, 1), (1, -1, 1), (1, 1)])
    def test_bad_spacing(self, bad):
        with pytest.raises(ValueError):
            resample(Volume(np.zeros((2, 2, 2))), bad)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            resample(Volume(np.zeros((2, 2, 2))), (2, 2, 2), "nearest")


class TestNormalize:
    def test_identity_stats(self, rng):
        v = Volume(rng.normal(size=(2, 3, 4)), phase="NC")
        np.testing.assert_array_equal(normalize(v, PhaseStats({"NC": 0}, {"NC": 1})).data, v.data)

    def test_constant_at_mean(self):
        v = Volume(np.full((2, 2, 2), 60.0), phase="VP")
        assert not normalize(v, PhaseStats({"VP": 60}, {"VP": 12})).data.any()

    def test_roundtrip(self, rng):
        v = Volume(rng.normal(50, 30, size=(3, 4, 5)), phase="AP")
        stats = PhaseStats({"AP": 47.3}, {"AP": 21.9})
        np.testing.assert_allclose(denormalize(normalize(v, stats), stats).data, v.data, atol=1e-9)

    def test_missing_phase(self):
        with pytest.raises(KeyError):
            normalize(Volume(np.zeros((1, 1, 1)), phase="DP"), PhaseStats({"NC": 0}, {"NC": 1}))

    def test_corpus_stats_pool_voxels(self):
        a = make_study({"NC": np.zeros((1, 1, 2))})
        b = make_study({"NC": np.full((1, 1, 2), 2.0)})
        stats = compute_phase_stats([a, b])
        assert stats.mean[Phase.NC] == 1.0 and stats.std[Phase.NC] == 1.0

    def test_normalizer_estimator(self):
        a = make_study({"NC": np.array([[[0.0, 4.0]]]), "VP": np.array([[[1.0, 1.0]]])})
        norm = PhaseNormalizer().fit([a])
        out = norm.transform([a])[0]
        np.testing.assert_array_equal(out[Phase.NC], [[[-1.0, 1.0]]])
        # zero spread falls back to unit std
        np.testing.assert_array_equal(out[Phase.VP], [[[0.0, 0.0]]])
        assert PhaseStats.from_dict(norm.stats_.to_dict()) == norm.stats_


class TestCrop:
    def test_full_size(self, phantom_study):
        crop = crop_random(phantom_study, phantom_study.dims, 3)
        assert crop.origin == (0, 0, 0)
        assert [l.box for l in crop.lesions] == [l.box for l in phantom_study.lesions]

    def test_deterministic(self, phantom_study):
        a = crop_random(phantom_study, (16, 16, 6), 11)
        b = crop_random(phantom_study, (16, 16, 6), 11)
        assert a.origin == b.origin
        for p in phantom_study.phases:
            np.testing.assert_array_equal(a.volumes[p], b.volumes[p])

    def test_same_window_all_phases(self, phantom_study):
        crop = crop_random(phantom_study, (8, 8, 4), 5)
        ox, oy, oz = crop.origin
        for p, arr in crop.volumes.items():
            np.testing.assert_array_equal(arr, phantom_study.volumes[p].data[oz:oz + 4, oy:oy + 8, ox:ox + 8])

    def test_too_large(self, phantom_study):
        with pytest.raises(ValueError):
            crop_random(phantom_study, (64, 8, 4), 0)

    def test_annotations_translated_clipped_dropped(self):
        s = make_study({"NC": np.zeros((10, 20, 20))}, lesions=[
            LesionAnnotation(Box3(2, 2, 2, 6, 6, 4), "HCC"),
            LesionAnnotation(Box3(8, 8, 0, 12, 12, 3), "TACE"),
            LesionAnnotation(Box3(15, 15, 5, 18, 18, 8), "HCC")])
        crop = crop_window(s, (4, 4, 1), (6, 6, 4))
        boxes = [(l.kind, l.box.to_list()) for l in crop.lesions]
        assert boxes == [("HCC", [0, 0, 1, 2, 2, 3]), ("TACE", [4, 4, 0, 6, 6, 2])]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 4))
    def test_lesion_survives_iff_overlap(self, ox, oy, oz):
        box = Box3(7, 3, 2, 11, 9, 5)
        s = make_study({"NC": np.zeros((10, 20, 20))}, lesions=[LesionAnnotation(box, "HCC")])
        crop = crop_window(s, (ox, oy, oz), (6, 6, 4))
        window = Box3(ox, oy, oz, ox + 6, oy + 6, oz + 4)
        from hpvd.geometry import intersection_volume
        assert bool(crop.lesions) == (intersection_volume(box, window) > 0)


class TestSlidingWindows:
    @pytest.mark.parametrize("nz, expected", [
        (48, [(0, 48)]), (80, [(0, 48), (32, 80)]), (49, [(0, 48), (1, 49)]), (10, [(0, 10)]),
        (112, [(0, 48), (32, 80), (64, 112)]), (113, [(0, 48), (32, 80), (64, 112), (65, 113)])])
    def test_ranges(self, nz, expected):
        assert sliding_windows(nz, 48, 16) == expected

    def test_dims_tuple(self):
        assert sliding_windows((64, 64, 80), 48) == [(0, 48), (32, 80)]

    def test_overlap_too_large(self):
        with pytest.raises(ValueError):
            sliding_windows(100, 16, 16)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 300), st.integers(2, 60), st.data())
    def test_cover_and_overlap(self, nz, w, data):
        ov = data.draw(st.integers(0, w - 1))
        r = sliding_windows(nz, w, ov)
        covered = np.zeros(nz, dtype=int)
        for s, e in r:
            covered[s:e] += 1
        assert covered.min() >= 1 and r[0][0] == 0 and r[-1][1] == nz
        for (s0, e0), (s1, e1) in zip(r[:-2], r[1:-1]):
            assert e0 - s1 == ov


class TestStitch:
    def test_single_window_identity(self, rng):
        f = rng.normal(size=(5, 3, 3))
        np.testing.assert_array_equal(stitch([((0, 5), f)]), f)

    def test_mean_in_overlap(self):
        out = stitch([((0, 4), np.zeros((4, 1))), ((2, 6), np.ones((4, 1)))], depth_axis=0)
        np.testing.assert_array_equal(out[:, 0], [0, 0, 0.5, 0.5, 1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            stitch([((0, 4), np.zeros((3, 1, 1)))])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 120), st.integers(2, 40), st.data())
    def test_reconstructs_field(self, nz, w, data):
        ov = data.draw(st.integers(0, w - 1))
        field = np.random.default_rng(nz).normal(size=(2, nz, 3, 2))
        parts = [((s, e), field[:, s:e]) for s, e in sliding_windows(nz, w, ov)]
        np.testing.assert_allclose(stitch(parts), field, rtol=0, atol=1e-12)
