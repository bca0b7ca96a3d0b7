import numpy as np
import pytest

from ulsa.constants import DEFAULT_STAIN_PARAMS, DEFAULT_STAIN_SET
from ulsa.errors import MissingTranslator, UlsaError
from ulsa.imagecore import Image, read_png, write_png
from ulsa.manifest import Manifest, Record
from ulsa.translate import (
    FileImportTranslator,
    ParametricStain,
    ParametricTranslator,
    StainId,
    StainSet,
    batch_translate,
    check_registry_complete,
    parametric_translate,
)

A = DEFAULT_STAIN_PARAMS["srcA"]
B = DEFAULT_STAIN_PARAMS["tgtB"]


class TestStainTypes:
    def test_stain_set_needs_both_roles(self):
        with pytest.raises(UlsaError):
            StainSet(tuple(), (StainId("t", "target"),))
        with pytest.raises(UlsaError):
            StainSet.from_names(["a"], ["a"])  # duplicate name

    def test_parametric_stain_validation(self):
        with pytest.raises(UlsaError):
            ParametricStain(dark=(0.9, 0.9, 0.9), light=(0.5, 0.5, 0.5))  # dark brighter
        with pytest.raises(UlsaError):
            ParametricStain(dark=(0.1, 0.1, 0.1), light=(0.9, 0.9, 0.9), gamma=3.0)


class TestParametricTranslation:
    def test_midpoint_density_renders_midpoint_color(self):
        stain = ParametricStain(dark=(0.2, 0.0, 0.4), light=(1.0, 0.8, 0.6), gamma=1.0)
        img = stain.render(np.full((3, 3), 0.5))
        expected = (np.asarray(stain.light) + np.asarray(stain.dark)) / 2.0
        assert np.abs(img.pixels - expected).max() < 1e-12

    def test_same_params_is_identity(self, rng):
        d = rng.uniform(0, 1, size=(10, 10))
        img = A.render(d)
        out = parametric_translate(img, A, A)
        assert np.abs(out.pixels - img.pixels).max() < 1e-6

    def test_background_maps_to_destination_light(self):
        img = A.render(np.zeros((4, 4)))
        out = parametric_translate(img, A, B)
        assert np.abs(out.pixels - np.asarray(B.light)).max() < 1e-9

    def test_round_trip_random_density_field(self, rng):
        d = rng.uniform(0, 1, size=(16, 16))
        img = A.render(d)
        back = parametric_translate(parametric_translate(img, A, B), B, A)
        assert np.abs(back.pixels - img.pixels).max() < 1e-3

    def test_structure_preserved(self, rng):
        d = rng.uniform(0, 1, size=(16, 16))
        img = A.render(d)
        out = parametric_translate(img, A, B)
        assert np.abs(B.density_of(out) - A.density_of(img)).max() < 1e-3

    def test_density_recovery(self, rng):
        d = rng.uniform(0, 1, size=(12, 12))
        for stain in DEFAULT_STAIN_PARAMS.values():
            assert np.abs(stain.density_of(stain.render(d)) - d).max() < 1e-3


class TestTranslatorRegistry:
    def test_parametric_covers_all_pairs(self):
        tr = ParametricTranslator(dict(DEFAULT_STAIN_PARAMS))
        check_registry_complete(tr, DEFAULT_STAIN_SET)

    def test_incomplete_registry_fails_fast(self):
        tr = ParametricTranslator({"srcA": A, "tgtB": B})
        with pytest.raises(MissingTranslator):
            check_registry_complete(tr, DEFAULT_STAIN_SET)  # tgtC missing

    def test_same_stain_pair_rejected(self, rng):
        tr = ParametricTranslator(dict(DEFAULT_STAIN_PARAMS))
        img = A.render(rng.uniform(0, 1, size=(4, 4)))
        with pytest.raises(UlsaError):
            tr.translate(img, "srcA", "srcA")

    def test_missing_pair_raises(self, rng):
        tr = ParametricTranslator({"srcA": A, "tgtB": B})
        img = A.render(rng.uniform(0, 1, size=(4, 4)))
        with pytest.raises(MissingTranslator):
            tr.translate(img, "srcA", "tgtC")


class TestFileImportTranslator:
    def test_returns_file_pixels_bit_exactly(self, rng, tmp_path):
        pair_dir = tmp_path / "srcA_to_tgtB"
        pair_dir.mkdir()
        stored = Image(rng.integers(0, 256, size=(8, 8, 3)) / 255.0)
        write_png(stored, pair_dir / "tile01.png")
        tr = FileImportTranslator.scan(tmp_path)
        assert tr.pairs() == {("srcA", "tgtB")}
        out = tr.translate(Image(np.zeros((8, 8, 3))), "srcA", "tgtB", stem="tile01")
        assert np.array_equal(out.pixels, stored.pixels)

    def test_missing_file_fails(self, tmp_path):
        (tmp_path / "srcA_to_tgtB").mkdir()
        tr = FileImportTranslator.scan(tmp_path)
        with pytest.raises(UlsaError):
            tr.translate(Image(np.zeros((4, 4, 3))), "srcA", "tgtB", stem="nope")


def _labeled_manifest(tmp_path, rng, n=5):
    base = tmp_path / "src"
    (base / "masks").mkdir(parents=True)
    records = []
    for i in range(n):
        d = rng.uniform(0, 1, size=(16, 16))
        write_png(A.render(d), base / f"img{i}.png")
        mask = (d > 0.5).astype(np.uint8)
        from ulsa.imagecore import write_mask_png

        write_mask_png(mask, base / "masks" / f"img{i}_mask.png")
        records.append(
            Record(
                image_path=f"img{i}.png",
                stain="srcA",
                split="train",
                patient_id=f"p{i}",
                mask_path=f"masks/img{i}_mask.png",
            )
        )
    return Manifest(records, base_dir=base, image_size=(16, 16))


class TestBatchTranslate:
    def test_empty_manifest(self, tmp_path):
        src = Manifest([], base_dir=tmp_path)
        out, errors = batch_translate(src, "tgtB", tmp_path / "out", ParametricTranslator(dict(DEFAULT_STAIN_PARAMS)))
        assert out.records == [] and errors == []
        assert not list((tmp_path / "out").glob("*.png"))

    def test_translation_inherits_labels(self, rng, tmp_path):
        src = _labeled_manifest(tmp_path, rng, n=5)
        stains = dict(DEFAULT_STAIN_PARAMS)
        stains["tgtD"] = ParametricStain(dark=(0.1, 0.3, 0.3), light=(0.9, 0.95, 0.9), gamma=1.1)
        tr = ParametricTranslator(stains)
        all_records = []
        for dst in ("tgtB", "tgtC", "tgtD"):
            out, errors = batch_translate(src, dst, tmp_path / f"out_{dst}", tr)
            assert errors == []
            assert len(out.records) == 5
            for rec_out, rec_in in zip(out.records, src.records):
                assert rec_out.stain == dst
                assert rec_out.origin == "synthetic"
                assert rec_out.patient_id == rec_in.patient_id
                mask_out = (tmp_path / f"out_{dst}" / rec_out.mask_path).read_bytes()
                mask_in = src.mask_file(rec_in).read_bytes()
                assert mask_out == mask_in
            all_records.extend(out.records)
        assert len(all_records) == 15

    def test_label_distribution_preserved(self, rng, tmp_path):
        base = tmp_path / "cls"
        base.mkdir()
        records = []
        labels = [0, 1, 1, 0, 1]
        for i, lab in enumerate(labels):
            write_png(A.render(rng.uniform(0, 1, size=(8, 8))), base / f"x{i}.png")
            records.append(
                Record(image_path=f"x{i}.png", stain="srcA", split="train", patient_id=f"q{i}", label=lab)
            )
        src = Manifest(records, base_dir=base)
        out, _ = batch_translate(src, "tgtC", tmp_path / "o", ParametricTranslator(dict(DEFAULT_STAIN_PARAMS)))
        assert sorted(r.label for r in out.records) == sorted(labels)

    def test_per_record_failures_are_collected(self, rng, tmp_path):
        src = _labeled_manifest(tmp_path, rng, n=3)
        # one record already carries the destination stain: skipped, reported
        bad = Record(image_path="img0.png", stain="tgtB", split="train", patient_id="pX",
                     mask_path="masks/img0_mask.png")
        src.records.append(bad)
        out, errors = batch_translate(src, "tgtB", tmp_path / "out", ParametricTranslator(dict(DEFAULT_STAIN_PARAMS)))
        assert len(out.records) == 3
        assert len(errors) == 1 and "img0.png" in errors[0]

    def test_translated_images_decode(self, rng, tmp_path):
        src = _labeled_manifest(tmp_path, rng, n=2)
        out, _ = batch_translate(src, "tgtB", tmp_path / "out", ParametricTranslator(dict(DEFAULT_STAIN_PARAMS)))
        for rec in out.records:
            img = read_png(out.image_file(rec))
            assert (img.height, img.width) == (16, 16)
