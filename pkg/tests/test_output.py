"""Tests for run artifacts and manifests."""

import json
from pathlib import Path

import numpy as np
import pandas as pd

from output import (
    MANIFEST_NAME,
    OutputManager,
    RunManifest,
    atomic_write_text,
    sanitize_filename,
    write_csv,
)


class TestSanitizeFilename:
    def test_strips_invalid_characters(self):
        assert sanitize_filename('a<b>:c"d|e?f*.csv') == "abcdef.csv"

    def test_collapses_whitespace(self):
        assert sanitize_filename("  my   run  ") == "my_run"

    def test_empty_name(self):
        assert sanitize_filename("???") == "untitled"

    def test_truncates(self):
        assert len(sanitize_filename("x" * 300)) == 100


class TestAtomicWrite:
    def test_writes_and_leaves_no_temp_file(self, tmp_path):
        path = atomic_write_text(tmp_path / "sub" / "a.txt", "hello\n")
        assert path.read_text(encoding="utf-8") == "hello\n"
        assert [p.name for p in path.parent.iterdir()] == ["a.txt"]

    def test_overwrites(self, tmp_path):
        path = tmp_path / "a.txt"
        atomic_write_text(path, "old")
        atomic_write_text(path, "new")
        assert path.read_text(encoding="utf-8") == "new"


class TestWriteCsv:
    def test_full_precision(self, tmp_path):
        value = 0.1 + 0.2
        path = write_csv(pd.DataFrame({"x": [value]}), tmp_path / "t.csv")
        text = path.read_text(encoding="utf-8")
        assert text == "x\n0.30000000000000004\n"
        assert float(text.splitlines()[1]) == value

    def test_round_trip_is_exact(self, tmp_path, rng):
        values = rng.standard_normal(50) * 1e-7
        path = write_csv(pd.DataFrame({"v": values}), tmp_path / "t.csv")
        np.testing.assert_array_equal(pd.read_csv(path, float_precision="round_trip")["v"].to_numpy(), values)


class TestRunManifest:
    def test_flat_dict(self):
        manifest = RunManifest("gen", {"kind": "friedman", "seed": 3})
        manifest.add_output(Path("/tmp/x/dataset.csv"))
        data = manifest.to_dict()
        assert data == {
            "command": "gen",
            "kind": "friedman",
            "seed": 3,
            "outputs": ["dataset.csv"],
            "schema_version": 1,
            "status": "ok",
        }

    def test_error_round_trip(self):
        manifest = RunManifest("train", {"lr": 0.1}, status="error", error="diverged")
        restored = RunManifest.from_dict(manifest.to_dict())
        assert restored == manifest


class TestOutputManager:
    def test_save_and_load_manifest(self, tmp_path):
        manager = OutputManager(tmp_path / "run")
        manifest = RunManifest("bounds", {"mu": "1,2"})
        manager.save_frame(pd.DataFrame({"a": [1.0]}), "table.csv", manifest)
        manager.save_text("doc\n", "model.net", manifest)
        path = manager.save_manifest(manifest)
        assert path.name == MANIFEST_NAME
        assert json.loads(path.read_text(encoding="utf-8"))["outputs"] == ["table.csv", "model.net"]
        assert manager.load_manifest() == manifest

    def test_missing_manifest(self, tmp_path):
        assert OutputManager(tmp_path).load_manifest() is None

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
        assert OutputManager(tmp_path).load_manifest() is None
