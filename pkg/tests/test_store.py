"""Persistence formats: checkpoints, manifests, reports, key-value files."""

import struct

import numpy as np
import pytest

from malconvlab.errors import (
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    ManifestError,
    StoreError,
)
from malconvlab.evaluation import ReportRow
from malconvlab.model import Hyperparams, MalConvModel, predict_score
from malconvlab.store import (
    ManifestEntry,
    bytes_digest,
    load_checkpoint,
    load_sample,
    load_split,
    read_csv_table,
    read_keyvalues,
    read_manifest,
    read_report,
    save_checkpoint,
    write_csv_table,
    write_keyvalues,
    write_manifest,
    write_report,
)

SMALL = Hyperparams(max_len=200, embed_dim=4, kernel_size=20, num_filters=6, hidden_units=5)

# Checkpoint layout: magic+version (6 bytes), architecture (36), lengths (72).
_MAGIC_END = 6
_HYPER_END = 6 + 36
_LENGTHS_END = 6 + 36 + 72


def small_model(seed=0) -> MalConvModel:
    return MalConvModel(
        Hyperparams(
            max_len=200, embed_dim=4, kernel_size=20, num_filters=6, hidden_units=5, seed=seed
        )
    )


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = small_model(1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.hyper == model.hyper
        assert loaded.digest() == model.digest()
        for (_, a), (_, b) in zip(model.parameters(), loaded.parameters()):
            assert a.tobytes() == b.tobytes()
        probe = bytes(range(200)) * 1
        assert predict_score(loaded, probe) == predict_score(model, probe)

    def test_expect_matching_architecture_passes(self, tmp_path):
        model = small_model(2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, expect=SMALL)  # seed differs, arch matches
        assert loaded.digest() == model.digest()

    def test_expect_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        other = Hyperparams(max_len=400, embed_dim=4, kernel_size=20, num_filters=6, hidden_units=5)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expect=other)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<H", blob, 4, 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_invalid_architecture_in_header(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, _MAGIC_END, 0)  # max_len = 0
        path.write_bytes(bytes(blob))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_length_table_disagreeing_with_architecture(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        blob = bytearray(path.read_bytes())
        (first_len,) = struct.unpack_from("<Q", blob, _HYPER_END)
        struct.pack_into("<Q", blob, _HYPER_END, first_len + 4)
        path.write_bytes(bytes(blob))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [3, _MAGIC_END + 10, _LENGTHS_END + 5])
    def test_truncation_is_corruption(self, tmp_path, keep):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes_are_corruption(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(small_model(7), a)
        save_checkpoint(small_model(7), b)
        assert a.read_bytes() == b.read_bytes()


def entry_for(tmp_path, name: str, data: bytes, label=1, split="test") -> ManifestEntry:
    (tmp_path / name).write_bytes(data)
    return ManifestEntry(name, label, split, len(data), bytes_digest(data))


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [
            ManifestEntry("a.bin", 0, "train", 10, "d" * 64),
            ManifestEntry("we,ird.bin", 1, "test", 0, "e" * 64),
        ]
        path = tmp_path / "manifest.csv"
        write_manifest(entries, path)
        assert read_manifest(path) == entries

    def test_empty_file_is_empty_manifest(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("")
        assert read_manifest(path) == []

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("\na.bin,0,train,1,aa\n\n")
        assert len(read_manifest(path)) == 1

    @pytest.mark.parametrize(
        "row,fragment",
        [
            ("a.bin,0,train,1", "expected 5 fields"),
            ("a.bin,x,train,1,aa", "must be integers"),
            ("a.bin,0,train,x,aa", "must be integers"),
            ("a.bin,2,train,1,aa", "label must be"),
            ("a.bin,0,dev,1,aa", "unknown split"),
            ("a.bin,0,train,-1,aa", "size must be >= 0"),
        ],
    )
    def test_malformed_second_line(self, tmp_path, row, fragment):
        path = tmp_path / "manifest.csv"
        path.write_text(f"ok.bin,0,train,1,aa\n{row}\n")
        with pytest.raises(ManifestError) as info:
            read_manifest(path)
        assert fragment in str(info.value)
        assert info.value.line == 2
        assert "(line 2)" in str(info.value)

    def test_duplicate_path(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a.bin,0,train,1,aa\na.bin,1,test,2,bb\n")
        with pytest.raises(ManifestError) as info:
            read_manifest(path)
        assert info.value.line == 2


class TestLoadSample:
    def test_verifies_content(self, tmp_path):
        entry = entry_for(tmp_path, "s.bin", b"hello world")
        assert load_sample(tmp_path, entry) == b"hello world"

    def test_size_mismatch(self, tmp_path):
        entry = entry_for(tmp_path, "s.bin", b"hello")
        (tmp_path / "s.bin").write_bytes(b"hello!")
        with pytest.raises(StoreError, match="size"):
            load_sample(tmp_path, entry)

    def test_digest_mismatch(self, tmp_path):
        entry = entry_for(tmp_path, "s.bin", b"hello")
        (tmp_path / "s.bin").write_bytes(b"jello")
        with pytest.raises(StoreError, match="digest"):
            load_sample(tmp_path, entry)

    def test_load_split_filters_and_orders(self, tmp_path):
        entries = [
            entry_for(tmp_path, "a.bin", b"aa", label=0, split="train"),
            entry_for(tmp_path, "b.bin", b"bb", label=1, split="test"),
            entry_for(tmp_path, "c.bin", b"cc", label=0, split="test"),
        ]
        samples, labels, picked = load_split(tmp_path, entries, "test")
        assert samples == [b"bb", b"cc"]
        assert labels.tolist() == [1, 0]
        assert [e.path for e in picked] == ["b.bin", "c.bin"]

    def test_load_split_unknown_split(self, tmp_path):
        with pytest.raises(ValueError):
            load_split(tmp_path, [], "validation")


def report_row(cell=0, attack="fgm_append", budget=200, eps_step=0.1, eps_ball=None,
               n_candidates=40, n_success=13, rate=0.325, modified=200.0, evals=1.0):
    return ReportRow(
        cell=cell, attack=attack, budget=budget, eps_step=eps_step, eps_ball=eps_ball,
        n_candidates=n_candidates, n_success=n_success, success_rate=rate,
        mean_modified_bytes=modified, mean_gradient_evals=evals,
        model_id="abcdef012345", seed=7, n_excluded=0,
    )


class FakeReport:
    def __init__(self, rows):
        self.rows = rows


class TestReportFile:
    def test_round_trip_preserves_floats_exactly(self, tmp_path):
        rows = [
            report_row(cell=0, rate=0.1 + 0.2, eps_step=1 / 3),
            report_row(cell=1, attack="slack_fgm", budget=0, eps_ball=0.25 * (2 ** -3)),
        ]
        path = tmp_path / "report.txt"
        write_report(FakeReport(rows), path)
        back = read_report(path)
        assert len(back) == 2
        assert back[0]["success_rate"] == 0.1 + 0.2
        assert back[0]["eps_step"] == 1 / 3
        assert back[0]["eps_ball"] is None
        assert back[1]["eps_ball"] == 0.25 * (2 ** -3)
        assert back[1]["attack"] == "slack_fgm"
        assert back[0]["model_id"] == "abcdef012345"
        assert back[0]["n_candidates"] == 40

    def test_empty_report_is_header_only(self, tmp_path):
        path = tmp_path / "report.txt"
        write_report(FakeReport([]), path)
        assert len(path.read_text().splitlines()) == 1
        assert read_report(path) == []

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "report.txt"
        path.write_text("fgm_append,200\n")
        with pytest.raises(StoreError, match="header"):
            read_report(path)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "report.txt"
        write_report(FakeReport([report_row()]), path)
        lines = path.read_text().splitlines()
        path.write_text(lines[0].replace("eval-report 1:", "eval-report 2:") + "\n" + lines[1] + "\n")
        with pytest.raises(StoreError, match="version"):
            read_report(path)

    def test_unknown_fields_rejected(self, tmp_path):
        path = tmp_path / "report.txt"
        write_report(FakeReport([]), path)
        header = path.read_text().rstrip("\n")
        path.write_text(header + ",surprise\n")
        with pytest.raises(StoreError, match="unknown report fields"):
            read_report(path)

    def test_short_record_line_rejected(self, tmp_path):
        path = tmp_path / "report.txt"
        write_report(FakeReport([report_row()]), path)
        lines = path.read_text().splitlines()
        cells = lines[1].split(",")
        path.write_text(lines[0] + "\n" + ",".join(cells[:-1]) + "\n")
        with pytest.raises(StoreError, match="expected"):
            read_report(path)

    def test_unparseable_cell_rejected(self, tmp_path):
        path = tmp_path / "report.txt"
        write_report(FakeReport([report_row()]), path)
        text = path.read_text().replace("200", "two hundred")
        path.write_text(text)
        with pytest.raises(StoreError, match="invalid"):
            read_report(path)


class TestKeyValues:
    def test_round_trip(self, tmp_path):
        mapping = {
            "command": "train",
            "count": 400,
            "rate": 0.1 + 0.2,
            "missing": None,
            "flag": True,
            "budgets": [50, 200],
        }
        path = tmp_path / "config.txt"
        write_keyvalues(mapping, path)
        assert read_keyvalues(path) == mapping

    @pytest.mark.parametrize("key", ["", "two words", "a=b"])
    def test_invalid_keys_rejected_on_write(self, tmp_path, key):
        with pytest.raises(StoreError):
            write_keyvalues({key: 1}, tmp_path / "config.txt")

    def test_missing_header(self, tmp_path):
        path = tmp_path / "config.txt"
        path.write_text("a = 1\n")
        with pytest.raises(StoreError, match="header"):
            read_keyvalues(path)

    def test_line_without_separator(self, tmp_path):
        path = tmp_path / "config.txt"
        write_keyvalues({"a": 1}, path)
        path.write_text(path.read_text() + "borked\n")
        with pytest.raises(StoreError, match="expected"):
            read_keyvalues(path)

    def test_invalid_json_value(self, tmp_path):
        path = tmp_path / "config.txt"
        write_keyvalues({"a": 1}, path)
        path.write_text(path.read_text() + "b = {not json\n")
        with pytest.raises(StoreError, match="invalid value"):
            read_keyvalues(path)


class TestCsvTable:
    def test_round_trip_as_strings(self, tmp_path):
        path = tmp_path / "table.csv"
        write_csv_table(path, ["a", "b"], [[1, "x"], [2.5, "y,z"]])
        header, rows = read_csv_table(path)
        assert header == ["a", "b"]
        assert rows == [["1", "x"], ["2.5", "y,z"]]

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "table.csv"
        path.write_text("")
        with pytest.raises(StoreError, match="empty table"):
            read_csv_table(path)
