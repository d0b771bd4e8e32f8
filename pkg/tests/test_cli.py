import json

import pytest

from csvd import load_index, save_index
from csvd.cli import main


@pytest.fixture
def table_path(tmp_path):
    path = tmp_path / "table.csvd"
    rc = main(["synth", "--out", str(path), "--V", "400", "--d", "16",
               "--modes", "10", "--spread", "0.05", "--seed", "3"])
    assert rc == 0
    return path


@pytest.fixture
def index_path(tmp_path, table_path):
    path = tmp_path / "index.csvi"
    rc = main(["cluster", "--input", str(table_path), "--out", str(path), "--C", "8"])
    assert rc == 0
    return path


def test_cluster_then_verify_clean(tmp_path, table_path, index_path, capsys):
    rc = main(["verify", "--table", str(table_path), "--index", str(index_path),
               "--steps", "20", "--queries", "20"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "0 violations" in out


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["cluster", "--out", "x.csvi"])
    assert exc.value.code == 2


def test_cluster_c_too_large(table_path, tmp_path):
    rc = main(["cluster", "--input", str(table_path), "--out",
               str(tmp_path / "x.csvi"), "--C", "401"])
    assert rc == 2


def test_missing_table_is_io_error(tmp_path):
    rc = main(["cluster", "--input", str(tmp_path / "nope.csvd"), "--out",
               str(tmp_path / "x.csvi")])
    assert rc == 3


def test_corrupt_table_is_io_error(tmp_path):
    bad = tmp_path / "bad.csvd"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK")
    rc = main(["cluster", "--input", str(bad), "--out", str(tmp_path / "x.csvi")])
    assert rc == 3


def test_verify_tampered_index_exits_1(tmp_path, table_path, index_path, capsys):
    import dataclasses

    from csvd import ClusterIndex

    index = load_index(index_path)
    clusters = list(index.clusters)
    clusters[2] = dataclasses.replace(clusters[2], radius=clusters[2].radius - 1e-3)
    tampered = ClusterIndex(
        clusters=clusters,
        perm=index.perm.copy(),
        mode=index.mode,
        vocab_size=index.vocab_size,
        hidden_dim=index.hidden_dim,
        bias_depth=index.bias_depth,
        fingerprint=index.fingerprint,
    )
    bad_path = tmp_path / "tampered.csvi"
    save_index(tampered, bad_path)
    rc = main(["verify", "--table", str(table_path), "--index", str(bad_path),
               "--steps", "5", "--queries", "5"])
    captured = capsys.readouterr()
    assert rc == 1
    assert '"cluster": 2' in captured.err


def test_bench_synth_writes_reports(tmp_path, capsys):
    out_dir = tmp_path / "report"
    rc = main(["bench", "--synth", "--V", "400", "--d", "16", "--C", "8",
               "--k", "5", "--steps", "15", "--out", str(out_dir)])
    assert rc == 0
    assert (out_dir / "report.json").exists()
    assert (out_dir / "report.csv").exists()
    doc = json.loads((out_dir / "report.json").read_text())
    assert doc["oracle"]["violations"] == 0


def test_bench_rerun_identical(tmp_path):
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    args = ["bench", "--synth", "--V", "400", "--d", "16", "--C", "8",
            "--k", "5", "--steps", "15", "--seed", "21"]
    assert main(args + ["--out", str(d1)]) == 0
    assert main(args + ["--out", str(d2)]) == 0
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
    assert (d1 / "report.csv").read_bytes() == (d2 / "report.csv").read_bytes()


def test_shard_sim_outcome_hash_invariant_in_n(tmp_path):
    hashes = []
    for n in ("1", "4"):
        out_dir = tmp_path / f"shard{n}"
        rc = main(["shard-sim", "--N", n, "--synth", "--V", "400", "--d", "16",
               "--C", "8", "--k", "5", "--steps", "15", "--out", str(out_dir)])
        assert rc == 0
        doc = json.loads((out_dir / "report.json").read_text())
        hashes.append(doc["aggregates"]["outcome_sha256"])
        assert doc["comm"]["n_workers"] == int(n)
    assert hashes[0] == hashes[1]


def test_bench_config_file_with_flag_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "vocab_size": 400, "hidden_dim": 16, "n_clusters": 8, "k": 5,
        "n_steps": 10, "epsilon": 0.2,
    }))
    out_dir = tmp_path / "r"
    rc = main(["bench", "--synth", "--config", str(cfg_path),
               "--epsilon", "0.05", "--out", str(out_dir)])
    assert rc == 0
    doc = json.loads((out_dir / "report.json").read_text())
    assert doc["spec"]["epsilon"] == 0.05  # flag beats config file
    assert doc["spec"]["vocab_size"] == 400  # config beats default


def test_bench_bad_config_key_exits_2(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"vocabulary": 100}))
    rc = main(["bench", "--synth", "--config", str(cfg_path)])
    assert rc == 2


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("CSVD_THREADS", "junk")
    rc = main(["bench", "--synth", "--V", "400", "--d", "16", "--C", "8",
               "--k", "5", "--steps", "1"])
    assert rc == 2
    monkeypatch.setenv("CSVD_THREADS", "4")
    rc = main(["bench", "--synth", "--V", "400", "--d", "16", "--C", "8",
               "--k", "5", "--steps", "1"])
    assert rc == 0


def test_help_runs():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
