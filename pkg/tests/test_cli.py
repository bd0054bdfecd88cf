"""Command surface end to end: exit codes, outputs, provenance, reruns.

Everything runs in-process through ``main(argv)`` so exit codes and
stderr are observable without spawning interpreters.
"""

import json
import struct

import numpy as np
import pytest

from specdens.cli import main
from specdens.decomp import validate_report
from specdens.errors import InputFormatError, UsageError
from specdens.net import load_checkpoint
from specdens.storage import (
    MATRIX_MAGIC,
    build_manifest,
    csv_text,
    read_matrix,
    write_matrix,
)


def read_csv(path):
    """Return (manifest_id, schema, columns, float rows) of an output CSV."""
    lines = path.read_text().splitlines()
    head = dict(part.split("=") for part in lines[0][2:].split(" "))
    rows = [tuple(float(c) for c in line.split(",")) for line in lines[2:]]
    return head["manifest"], head["schema"], lines[1].split(","), np.array(rows)


def manifest_of(out_dir, command):
    return json.loads((out_dir / f"{command}.manifest.json").read_text())


class TestMatrixFile:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((7, 7))
        A = A + A.T
        path = tmp_path / "a.spdm"
        write_matrix(path, A)
        assert np.array_equal(read_matrix(path), A)

    def test_rejects_nonsquare(self, tmp_path):
        with pytest.raises(UsageError, match="square"):
            write_matrix(tmp_path / "a.spdm", np.zeros((2, 3)))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.spdm"
        path.write_bytes(b"NOPE" + bytes(12 + 8))
        with pytest.raises(InputFormatError, match="bad magic"):
            read_matrix(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "a.spdm"
        path.write_bytes(MATRIX_MAGIC + struct.pack("<IQ", 9, 1) + bytes(8))
        with pytest.raises(InputFormatError, match="version"):
            read_matrix(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "a.spdm"
        write_matrix(path, np.eye(3))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(InputFormatError, match="truncated"):
            read_matrix(path)


class TestManifestAndCsv:
    def test_id_ignores_key_order_but_not_values(self):
        a = build_manifest("synth", {"p": 10, "seed": 1}, version="1")
        b = build_manifest("synth", {"seed": 1, "p": 10}, version="1")
        c = build_manifest("synth", {"p": 10, "seed": 2}, version="1")
        assert a["id"] == b["id"]
        assert a["id"] != c["id"]

    def test_csv_floats_survive_a_round_trip(self):
        value = 0.1 + 0.2  # repr-level precision, not %g rounding
        text = csv_text(("x",), [(value,)], "abc", "s/v1")
        assert text.splitlines()[0] == "# manifest=abc schema=s/v1"
        assert float(text.splitlines()[2]) == value


class TestExitCodes:
    def test_help_and_version_exit_zero(self, capsys):
        assert main(["--help"]) == 0
        assert main(["--version"]) == 0
        capsys.readouterr()

    def test_missing_subcommand_is_usage(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_ensemble_kind(self, tmp_path, capsys):
        rc = main(["synth", "--kind", "wigner", "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_malformed_spikes(self, tmp_path, capsys):
        rc = main(["synth", "--kind", "spiked_wishart", "--spikes", "a,b",
                   "--out-dir", str(tmp_path)])
        assert rc == 2
        capsys.readouterr()

    def test_missing_matrix_file(self, tmp_path, capsys):
        rc = main(["spectrum", "--matrix", str(tmp_path / "none.spdm"),
                   "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_corrupt_matrix_is_input_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.spdm"
        bad.write_bytes(b"GARBAGE DATA PADDED OUT")
        rc = main(["spectrum", "--matrix", str(bad), "--out-dir", str(tmp_path)])
        assert rc == 3
        assert "input error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def goe_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("goe")
    assert main(["synth", "--kind", "goe", "--p", "60", "--seed", "1",
                 "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def spiked_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("spiked")
    assert main(["synth", "--kind", "spiked_wishart", "--p", "80", "--n", "80",
                 "--spikes", "6,5", "--seed", "2", "--out-dir", str(out)]) == 0
    return out


class TestSynth:
    def test_outputs_and_oracle(self, goe_dir):
        names = {p.name for p in goe_dir.iterdir()}
        assert names == {"matrix.spdm", "oracle_spectrum.csv",
                         "synth.manifest.json"}
        A = read_matrix(goe_dir / "matrix.spdm")
        assert A.shape == (60, 60)
        assert np.array_equal(A, A.T)
        mid, schema, cols, rows = read_csv(goe_dir / "oracle_spectrum.csv")
        assert schema == "oracle-spectrum-csv/v1"
        assert cols == ["index", "eigenvalue"]
        assert rows.shape == (60, 2)
        assert np.abs(rows[:, 1]).max() <= 2.2  # semicircle support + slack

    def test_manifest_id_links_sidecar_to_csv(self, goe_dir):
        doc = manifest_of(goe_dir, "synth")
        mid, _, _, _ = read_csv(goe_dir / "oracle_spectrum.csv")
        assert doc["id"] == mid
        assert doc["command"] == "synth"
        assert doc["params"]["p"] == 60
        assert any(out.endswith("matrix.spdm") for out in doc["outputs"])
        assert "wall_time_s" in doc

    def test_rerun_is_byte_identical(self, goe_dir, tmp_path):
        assert main(["synth", "--kind", "goe", "--p", "60", "--seed", "1",
                     "--out-dir", str(tmp_path)]) == 0
        for name in ("matrix.spdm", "oracle_spectrum.csv"):
            assert (tmp_path / name).read_bytes() == \
                (goe_dir / name).read_bytes()
        # manifests agree on everything reproducible; wall time and
        # output paths are the only run-local fields
        a = manifest_of(goe_dir, "synth")
        b = manifest_of(tmp_path, "synth")
        for doc in (a, b):
            doc.pop("wall_time_s")
            doc.pop("outputs")
        assert a == b

    def test_planted_spikes_clear_the_bulk(self, spiked_dir):
        _, _, _, rows = read_csv(spiked_dir / "oracle_spectrum.csv")
        top = np.sort(rows[:, 1])[-2:]
        assert (top > 4.5).all()  # gamma=1 bulk ends near 4


class TestSpectrum:
    def test_density_outputs_agree(self, goe_dir, tmp_path):
        rc = main(["spectrum", "--matrix", str(goe_dir / "matrix.spdm"),
                   "--steps", "32", "--n-vec", "2", "--grid-points", "128",
                   "--seed", "0", "--out-dir", str(tmp_path)])
        assert rc == 0
        mid, schema, cols, rows = read_csv(tmp_path / "density.csv")
        assert schema == "density-csv/v1"
        report = json.loads((tmp_path / "density.json").read_text())
        assert report["schema"] == "density-report/v1"
        assert report["manifest"] == mid == manifest_of(tmp_path, "spectrum")["id"]
        assert report["operator"] == "matrix:matrix.spdm"
        assert report["mass"] == pytest.approx(1.0, abs=0.01)
        # the CSV and the JSON carry the same density
        np.testing.assert_allclose(rows[:, 1], report["density"]["values"])
        assert rows[:, 0].min() >= -2.6 and rows[:, 0].max() <= 2.6

    def test_worker_count_does_not_change_bytes(self, goe_dir, tmp_path,
                                                monkeypatch):
        args = ["spectrum", "--matrix", str(goe_dir / "matrix.spdm"),
                "--steps", "32", "--n-vec", "4", "--grid-points", "128"]
        a, b = tmp_path / "serial", tmp_path / "pooled"
        assert main(args + ["--out-dir", str(a)]) == 0
        monkeypatch.setenv("SPECDENS_WORKERS", "4")
        assert main(args + ["--out-dir", str(b)]) == 0
        assert (a / "density.csv").read_bytes() == (b / "density.csv").read_bytes()

    def test_invalid_worker_env_is_usage_error(self, goe_dir, tmp_path,
                                               monkeypatch, capsys):
        args = ["spectrum", "--matrix", str(goe_dir / "matrix.spdm"),
                "--out-dir", str(tmp_path)]
        monkeypatch.setenv("SPECDENS_WORKERS", "two")
        assert main(args) == 2
        monkeypatch.setenv("SPECDENS_WORKERS", "0")
        assert main(args) == 2
        capsys.readouterr()

    def test_deflate_extracts_the_spikes(self, spiked_dir, tmp_path):
        rc = main(["spectrum", "--matrix", str(spiked_dir / "matrix.spdm"),
                   "--deflate", "2", "--steps", "48", "--n-vec", "2",
                   "--grid-points", "128", "--seed", "3",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        top = json.loads((tmp_path / "top_spectrum.json").read_text())
        assert top["schema"] == "top-spectrum/v1"
        assert top["count"] == 2
        _, _, _, oracle = read_csv(spiked_dir / "oracle_spectrum.csv")
        expected = np.sort(oracle[:, 1])[::-1][:2]
        np.testing.assert_allclose(top["values"], expected, rtol=1e-6)
        # what remains is the bulk: support stops well below the spikes
        report = json.loads((tmp_path / "density.json").read_text())
        assert report["mass"] == pytest.approx(1.0, abs=0.01)
        assert max(report["density"]["grid"]) < min(top["values"]) - 1.0

    def test_deflate_must_be_positive(self, spiked_dir, tmp_path, capsys):
        rc = main(["spectrum", "--matrix", str(spiked_dir / "matrix.spdm"),
                   "--deflate", "0", "--out-dir", str(tmp_path)])
        assert rc == 2
        capsys.readouterr()

    def test_log_axis_route(self, spiked_dir, tmp_path):
        rc = main(["spectrum", "--matrix", str(spiked_dir / "matrix.spdm"),
                   "--log", "--steps", "64", "--n-vec", "2",
                   "--grid-points", "128", "--out-dir", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "density.json").read_text())
        assert report["density"]["scale"] == "log"
        assert report["mass"] == pytest.approx(1.0, abs=0.05)

    def test_matrix_and_checkpoint_are_exclusive(self, goe_dir, tmp_path,
                                                 capsys):
        rc = main(["spectrum", "--matrix", str(goe_dir / "matrix.spdm"),
                   "--checkpoint", "x.npz", "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "not both" in capsys.readouterr().err


GMM_DATA = {"kind": "gmm", "classes": 3, "n_per_class": 20, "dim": 4,
            "separation": 3.0, "std": 1.0, "seed": 5}


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    config = {
        "data": GMM_DATA,
        "model": {"layer_dims": [4, 8, 3], "activation": "tanh"},
        "train": {"epochs": 4, "lr": 0.1, "momentum": 0.9,
                  "weight_decay": 1e-4, "batch_size": 16, "seed": 7},
    }
    cfg = root / "train.json"
    cfg.write_text(json.dumps(config))
    data = root / "data.json"
    data.write_text(json.dumps(GMM_DATA))
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return {"root": root, "config": cfg, "data": data, "out": out,
            "final": out / "checkpoint_epoch0004.npz"}


class TestTrain:
    def test_checkpoints_and_metrics_on_disk(self, train_run):
        names = sorted(p.name for p in train_run["out"].iterdir())
        assert names == ["checkpoint_epoch0000.npz", "checkpoint_epoch0001.npz",
                         "checkpoint_epoch0002.npz", "checkpoint_epoch0004.npz",
                         "metrics.csv", "train.manifest.json"]
        mid, schema, cols, rows = read_csv(train_run["out"] / "metrics.csv")
        assert schema == "metrics-csv/v1"
        assert cols == ["epoch", "lr", "train_loss", "train_error",
                        "test_loss", "test_error"]
        np.testing.assert_array_equal(rows[:, 0], [0, 1, 2, 3, 4])
        assert rows[-1, 3] < rows[0, 3]  # train error fell
        assert mid == manifest_of(train_run["out"], "train")["id"]

    def test_resume_reaches_the_same_weights(self, train_run, tmp_path):
        rc = main(["train", "--config", str(train_run["config"]),
                   "--resume", str(train_run["out"] / "checkpoint_epoch0002.npz"),
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        a = load_checkpoint(train_run["final"])
        b = load_checkpoint(tmp_path / "checkpoint_epoch0004.npz")
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.velocity, b.velocity)

    def test_unknown_train_key_is_reported(self, train_run, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        doc = json.loads(train_run["config"].read_text())
        doc["train"]["turbo"] = True
        bad.write_text(json.dumps(doc))
        rc = main(["train", "--config", str(bad), "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "unknown train config key(s): turbo" in capsys.readouterr().err

    def test_unknown_section_is_reported(self, train_run, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        doc = json.loads(train_run["config"].read_text())
        doc["extras"] = {}
        bad.write_text(json.dumps(doc))
        assert main(["train", "--config", str(bad),
                     "--out-dir", str(tmp_path)]) == 2
        assert "unknown config section" in capsys.readouterr().err

    def test_divergence_exits_4_and_keeps_last_good(self, train_run, tmp_path,
                                                    capsys):
        doc = json.loads(train_run["config"].read_text())
        doc["train"]["lr"] = 1e200
        doc["train"]["epochs"] = 2
        cfg = tmp_path / "diverge.json"
        cfg.write_text(json.dumps(doc))
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)])
        assert rc == 4
        assert "diverged" in capsys.readouterr().err
        ck = load_checkpoint(tmp_path / "checkpoint_epoch0000.npz")
        assert ck.epoch == 0 and np.isfinite(ck.theta).all()

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "none.json"),
                   "--out-dir", str(tmp_path)])
        assert rc == 2
        capsys.readouterr()


class TestCheckpointAnalysis:
    def test_spectrum_from_checkpoint(self, train_run, tmp_path):
        rc = main(["spectrum", "--checkpoint", str(train_run["final"]),
                   "--data", str(train_run["data"]), "--which", "hess",
                   "--steps", "32", "--n-vec", "1", "--grid-points", "128",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "density.json").read_text())
        assert report["operator"] == "hess[train]"
        assert report["mass"] == pytest.approx(1.0, abs=0.01)

    def test_decompose_report_validates(self, train_run, tmp_path):
        rc = main(["decompose", "--checkpoint", str(train_run["final"]),
                   "--data", str(train_run["data"]), "--steps", "48",
                   "--n-vec", "1", "--grid-points", "128", "--seed", "1",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "attribution.json").read_text())
        validate_report(report)
        assert report["class_count"] == 3
        assert report["param_count"] == 67
        assert report["manifest"] == manifest_of(tmp_path, "decompose")["id"]

    def test_data_dimension_mismatch_is_input_error(self, train_run, tmp_path,
                                                    capsys):
        wrong = tmp_path / "data5.json"
        wrong.write_text(json.dumps({**GMM_DATA, "dim": 5}))
        rc = main(["spectrum", "--checkpoint", str(train_run["final"]),
                   "--data", str(wrong), "--steps", "16",
                   "--out-dir", str(tmp_path)])
        assert rc == 3
        assert "input error" in capsys.readouterr().err

    def test_bad_split_value(self, train_run, tmp_path, capsys):
        wrong = tmp_path / "weird.json"
        wrong.write_text(json.dumps({**GMM_DATA, "split": "weird"}))
        rc = main(["spectrum", "--checkpoint", str(train_run["final"]),
                   "--data", str(wrong), "--out-dir", str(tmp_path)])
        assert rc == 2
        capsys.readouterr()
