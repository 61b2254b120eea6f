import numpy as np
import pytest

from scda.data import DatasetManifest, ManifestEntry, write_manifest, write_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_cohort(tmp_path):
    """Write matrices + manifest; returns the manifest path."""

    def _make(matrices, labels=None, splits=None, name="cohort.manifest"):
        entries = []
        for i, values in enumerate(matrices):
            rel = f"m/s{i:03d}.txt"
            (tmp_path / "m").mkdir(exist_ok=True)
            write_matrix(tmp_path / rel, values)
            label = None if labels is None else labels[i]
            split = "target" if splits is None else splits[i]
            entries.append(ManifestEntry(f"s{i:03d}", rel, label, split))
        n = np.asarray(matrices[0]).shape[1] if matrices else 2
        path = tmp_path / name
        write_manifest(path, DatasetManifest(tuple(entries), n))
        return path

    return _make


_ACCEPTANCE = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""

    def _record(number, passed, detail):
        _ACCEPTANCE.append((number, passed, detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
