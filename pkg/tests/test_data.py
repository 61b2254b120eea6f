import hashlib

import numpy as np
import pytest

from oracles import brute_pearson
from scda.data import (
    AuditedCohort,
    CohortLoadError,
    DataError,
    DatasetManifest,
    DomainShift,
    ManifestEntry,
    RoiTimeseries,
    SchemaError,
    SyntheticSpec,
    generate_synthetic_cohort,
    load_cohort,
    normalize,
    read_manifest,
    read_matrix,
    validate_manifest,
    write_matrix,
    zscore_columns,
)


class TestRoiTimeseries:
    def test_rejects_too_small(self):
        with pytest.raises(DataError):
            RoiTimeseries("a", np.zeros((1, 3)))
        with pytest.raises(DataError):
            RoiTimeseries("a", np.zeros((3, 1)))

    def test_rejects_non_finite(self):
        values = np.zeros((4, 3))
        values[2, 1] = np.inf
        with pytest.raises(DataError, match=r"\(2, 1\)"):
            RoiTimeseries("a", values)

    def test_values_are_read_only(self):
        s = RoiTimeseries("a", np.ones((3, 2)))
        with pytest.raises(ValueError):
            s.values[0, 0] = 5.0


class TestNormalization:
    def test_zero_mean_unit_variance(self, rng):
        values, flags = zscore_columns(rng.normal(3.0, 2.0, size=(50, 4)))
        np.testing.assert_allclose(values.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(values.std(axis=0), 1, atol=1e-12)
        assert flags == ()

    def test_idempotent(self, rng):
        once = normalize(RoiTimeseries("a", rng.normal(size=(30, 5)) * 7 + 2))
        twice = normalize(once)
        assert np.max(np.abs(once.values - twice.values)) <= 1e-12

    def test_constant_column_zeroed_and_flagged(self, rng):
        values = rng.normal(size=(20, 3))
        values[:, 1] = 7.0
        out = normalize(RoiTimeseries("a", values))
        assert np.all(out.values[:, 1] == 0.0)
        assert out.constant_columns == (1,)
        assert out.flagged


class TestMatrixFiles:
    def test_round_trip_exact(self, tmp_path, rng):
        values = rng.normal(size=(17, 6)) * 1e3
        write_matrix(tmp_path / "x.txt", values)
        back = read_matrix(tmp_path / "x.txt")
        assert np.max(np.abs(back - values)) <= 1e-12

    def test_header(self, tmp_path):
        write_matrix(tmp_path / "x.txt", np.zeros((3, 2)))
        assert (tmp_path / "x.txt").read_text().splitlines()[0] == "#roi_timeseries v1 L=3 N=2"

    def test_nan_reports_position(self, tmp_path, make_cohort, rng):
        bad = rng.normal(size=(10, 4))
        path = make_cohort([rng.normal(size=(10, 4)), bad])
        text = (tmp_path / "m/s001.txt").read_text().splitlines()
        row = text[1 + 5].split()
        row[2] = "nan"
        text[1 + 5] = " ".join(row)
        (tmp_path / "m/s001.txt").write_text("\n".join(text) + "\n")
        with pytest.raises(DataError, match=r"\(5, 2\)"):
            load_cohort(read_manifest(path))


class TestLoadCohort:
    def test_order_preserved(self, make_cohort, rng):
        mats = [rng.normal(size=(12, 3)) for _ in range(3)]
        cohort = load_cohort(read_manifest(make_cohort(mats)))
        assert [s.subject_id for s in cohort] == ["s000", "s001", "s002"]
        for s, m in zip(cohort, mats):
            np.testing.assert_allclose(s.values, zscore_columns(m)[0], atol=1e-12)

    def test_varying_length_allowed(self, make_cohort, rng):
        cohort = load_cohort(read_manifest(make_cohort([rng.normal(size=(12, 3)), rng.normal(size=(20, 3))])))
        assert [s.n_timepoints for s in cohort] == [12, 20]

    def test_constant_column_flagged(self, make_cohort, rng):
        m = rng.normal(size=(12, 3))
        m[:, 0] = 7.0
        (s,) = load_cohort(read_manifest(make_cohort([m])))
        assert s.flagged and np.all(s.values[:, 0] == 0)

    def test_missing_file_names_subject(self, tmp_path, make_cohort, rng):
        path = make_cohort([rng.normal(size=(12, 3)), rng.normal(size=(12, 3))])
        (tmp_path / "m/s001.txt").unlink()
        with pytest.raises(CohortLoadError, match="s001"):
            load_cohort(read_manifest(path))

    def test_roi_mismatch_is_schema_error(self, tmp_path, make_cohort, rng):
        path = make_cohort([rng.normal(size=(12, 3)), rng.normal(size=(12, 3))])
        write_matrix(tmp_path / "m/s001.txt", rng.normal(size=(12, 4)))
        with pytest.raises(SchemaError):
            load_cohort(read_manifest(path))

    def test_min_length_filter(self, make_cohort, rng):
        path = make_cohort([rng.normal(size=(12, 3)), rng.normal(size=(180, 3))])
        kept = read_manifest(path).filter_min_length(170)
        assert [e.subject_id for e in kept.entries] == ["s001"]


class TestValidateManifest:
    def test_empty(self):
        report = validate_manifest(DatasetManifest((), 3))
        assert not report.ok
        assert any("empty cohort" in m for m in report.messages())

    def test_duplicate(self, make_cohort, rng):
        m = read_manifest(make_cohort([rng.normal(size=(5, 3))] * 2))
        dup = DatasetManifest(m.entries + (m.entries[0],), 3, root=m.root)
        report = validate_manifest(dup)
        assert any("duplicate" in msg for msg in report.messages())

    def test_label_required_for_source(self, make_cohort, rng):
        path = make_cohort([rng.normal(size=(5, 3))], labels=[None], splits=["source-train"])
        report = validate_manifest(read_manifest(path))
        assert any("label required" in m for m in report.messages())

    def test_target_may_omit_labels(self, make_cohort, rng):
        path = make_cohort([rng.normal(size=(5, 3))], labels=[None], splits=["target"])
        assert validate_manifest(read_manifest(path)).ok

    def test_missing_file(self, tmp_path, make_cohort, rng):
        path = make_cohort([rng.normal(size=(5, 3))])
        (tmp_path / "m/s000.txt").unlink()
        report = validate_manifest(read_manifest(path))
        assert report.statuses["s000"].startswith("missing file")

    def test_manifest_round_trip(self, make_cohort, rng):
        path = make_cohort([rng.normal(size=(5, 3))] * 2, labels=[1, None], splits=["source-train", "auxiliary"])
        m = read_manifest(path)
        assert m.entries == (
            ManifestEntry("s000", "m/s000.txt", 1, "source-train"),
            ManifestEntry("s001", "m/s001.txt", None, "auxiliary"),
        )


class TestAuditedCohort:
    def test_labels_hidden_and_logged(self):
        cohort = AuditedCohort([RoiTimeseries("a", np.eye(3), 1)])
        assert cohort[0].label is None
        assert cohort.access_log == []
        assert cohort.label_of("a") == 1
        assert cohort.access_log == ["a"]


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _block_correlation(cohort, block):
    """Mean within-block Pearson correlation per class, via the brute-force oracle."""
    out = {0: [], 1: []}
    for s in cohort:
        vals = [brute_pearson(list(s.values[:, i]), list(s.values[:, j]))
                for a, i in enumerate(block) for j in block[a + 1:]]
        out[s.label].append(np.mean(vals))
    return np.mean(out[1]) - np.mean(out[0])


class TestSyntheticCohort:
    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticSpec(subjects_per_class=3, n_timepoints=60, n_rois=5, planted_block=(1, 2), seed=4,
                             domain_shift=DomainShift(1.1, 2.0, 3.0))
        generate_synthetic_cohort(spec, tmp_path / "a")
        generate_synthetic_cohort(spec, tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_layout(self, tmp_path):
        spec = SyntheticSpec(subjects_per_class=5, n_timepoints=50, n_rois=4, planted_block=(1, 2),
                             target_subjects_per_class=2, domain_shift=DomainShift(1.3, 1.0, 1.0))
        src, tgt = generate_synthetic_cohort(spec, tmp_path)
        src_m, tgt_m = read_manifest(src), read_manifest(tgt)
        assert validate_manifest(src_m).ok and validate_manifest(tgt_m).ok
        assert len(src_m) == 10 and len(tgt_m) == 4
        assert {e.split for e in src_m.entries} == {"source-train", "source-val"}
        assert load_cohort(tgt_m)[0].n_timepoints == 65

    def test_invalid_spec(self):
        with pytest.raises(ValueError, match="planted_block"):
            SyntheticSpec(n_rois=4, planted_block=(0, 1))
        with pytest.raises(ValueError, match="noise_sigma"):
            SyntheticSpec(noise_sigma=0.0)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_synthetic_cohort(SyntheticSpec(subjects_per_class=1, n_timepoints=10, n_rois=3,
                                                    planted_block=(1,)), blocker / "sub")

    def test_no_signal_no_gap(self, tmp_path):
        spec = SyntheticSpec(subjects_per_class=50, n_timepoints=120, n_rois=6, planted_block=(1, 2, 3),
                             signal_strength=0.0, noise_sigma=1.0, seed=1)
        src, _ = generate_synthetic_cohort(spec, tmp_path)
        gap = _block_correlation(load_cohort(read_manifest(src)), [0, 1, 2])
        assert abs(gap) < 0.05

    def test_signal_opens_gap(self, tmp_path):
        spec = SyntheticSpec(subjects_per_class=50, n_timepoints=120, n_rois=6, planted_block=(1, 2, 3),
                             signal_strength=1.0, noise_sigma=1.0, seed=1)
        src, _ = generate_synthetic_cohort(spec, tmp_path)
        gap = _block_correlation(load_cohort(read_manifest(src)), [0, 1, 2])
        assert gap > 0.2
