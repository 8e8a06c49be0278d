import json

import pandas as pd
import pytest

import Trep
from conftest import TWO_CORRIDOR_6

TINY_CONFIG = """\
repr_dim: 4
embed_dim: 4
critic_hidden: 4
critic_rnn: 4
walks_per_cell: 2
walk_length: 6
window: 2
negatives: 2
embed_epochs: 1
pretrain_epochs: 1
pretrain_critic_iters: 1
omega: 2
replay_capacity: 4
max_iters: 3
walk_min: 2
walk_max: 4
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "map.txt").write_text(TWO_CORRIDOR_6)
    (tmp_path / "config.yaml").write_text(TINY_CONFIG)
    return tmp_path


def _run(workspace, command, *args, network=True):
    argv = [command, "--config", str(workspace / "config.yaml"), "--out-dir", str(workspace / "out"), "--quiet"]
    if network:
        argv += ["--map", str(workspace / "map.txt")]
    return Trep.main(argv + [str(a) for a in args])


def _manifest(workspace, command):
    return json.loads((workspace / "out" / f"manifest-{command}.json").read_text())


def test_build_map_writes_normalized_map_and_manifest(workspace, capsys):
    assert _run(workspace, "build-map") == 0
    assert (workspace / "out" / "map.txt").read_text() == TWO_CORRIDOR_6
    assert (workspace / "out" / "walls.txt").read_text() == ""
    manifest = _manifest(workspace, "build-map")
    assert manifest["map_hash"] in capsys.readouterr().out
    assert str(workspace / "map.txt") in manifest["inputs"]
    assert manifest["config"]["repr_dim"] == 4
    assert set(manifest["seeds"]) >= {"embedding", "train", "cluster"}


def test_unknown_config_key_exits_with_config_error(workspace, capsys):
    (workspace / "config.yaml").write_text("repr_dims: 4\n")
    assert _run(workspace, "build-map") == 2
    assert "error=config" in capsys.readouterr().err


def test_missing_map_is_a_config_error(workspace, capsys):
    assert _run(workspace, "build-map", network=False) == 2
    assert "needs --map" in capsys.readouterr().err


def test_missing_corpus_file_is_a_data_error(workspace, capsys):
    assert _run(workspace, "baseline", "dft", "--corpus", workspace / "nope.tsv") == 3
    assert "error=data" in capsys.readouterr().err


def test_synthetic_corpus_through_dft_curves(workspace, capsys):
    out = workspace / "out"
    assert _run(workspace, "gen-synth", "--per-group", 2, "--heldout") == 0
    corpus_lines = (out / "corpus.tsv").read_text().splitlines()
    assert len(corpus_lines) == 12
    assert len((out / "heldout.tsv").read_text().splitlines()) == 12

    assert _run(workspace, "baseline", "dft", "--corpus", out / "corpus.tsv") == 0
    encodings = pd.read_csv(out / "encodings-dft.csv", header=None)
    assert encodings.shape == (12, 4)

    assert _run(workspace, "cluster", "--encodings", out / "encodings-dft.csv", "--k", 6,
                "--corpus", out / "corpus.tsv") == 0
    assert "ari=" in capsys.readouterr().out
    clusters = pd.read_csv(out / "clusters.csv")
    assert clusters["cluster"].between(0, 5).all()

    assert _run(workspace, "eval-wcse", "--encodings", out / "encodings-dft.csv", "--corpus", out / "corpus.tsv") == 0
    curve = pd.read_csv(out / "wcse.csv")
    assert curve["K"].tolist() == list(range(2, 11))
    assert (curve["WCSE"] >= 0).all()

    assert _run(workspace, "export-curves", out / "wcse.csv", network=False) == 0
    merged = pd.read_csv(out / "curves.csv")
    assert list(merged.columns) == ["series", "K", "WCSE"]
    assert (merged["series"] == "wcse").all()
    assert "<svg" in (out / "curves.svg").read_text()


def test_eval_wcse_rejects_bad_range(workspace):
    out = workspace / "out"
    assert _run(workspace, "gen-synth", "--per-group", 1) == 0
    assert _run(workspace, "baseline", "dft", "--corpus", out / "corpus.tsv") == 0
    assert _run(workspace, "eval-wcse", "--encodings", out / "encodings-dft.csv", "--corpus", out / "corpus.tsv",
                "--k-min", 5, "--k-max", 3) == 2


def test_ingest_atc_command(workspace, capsys):
    (workspace / "atc.csv").write_text("0,7,1000,1000\n2,7,4000,1000\n4,7,7000,1000\n")
    assert _run(workspace, "ingest-atc", "--input", workspace / "atc.csv") == 0
    assert "trajectories=1" in capsys.readouterr().out
    assert (workspace / "out" / "corpus.tsv").read_text() == "7\t0:0,0:1,0:2\n"


def test_ingest_atc_malformed_row_is_a_data_error(workspace, capsys):
    (workspace / "atc.csv").write_text("0,7,1000,1000\n2,7,4000,1000\n4,7,7000,1000,99\n")
    assert _run(workspace, "ingest-atc", "--input", workspace / "atc.csv") == 3
    err = capsys.readouterr().err
    assert "error=data" in err
    assert "line 3" in err


def test_learned_pipeline_end_to_end(workspace, capsys):
    out = workspace / "out"
    assert _run(workspace, "gen-synth", "--per-group", 1) == 0
    assert _run(workspace, "embed") == 0
    embeddings = ["--embeddings", out / "embeddings.npz"]
    assert _run(workspace, "pretrain", "--corpus", out / "corpus.tsv", *embeddings) == 0
    assert (out / "pretrained.npz").exists()
    assert len((out / "pretrain_log.jsonl").read_text().splitlines()) == 2

    assert _run(workspace, "train", "--checkpoint", out / "pretrained.npz", *embeddings) == 0
    assert "iterations=3" in capsys.readouterr().out

    assert _run(workspace, "encode", "--checkpoint", out / "trained.npz", "--corpus", out / "corpus.tsv",
                *embeddings) == 0
    encodings = pd.read_csv(out / "encodings.csv", header=None)
    assert encodings.shape == (6, 4)
    assert _manifest(workspace, "encode")["checkpoints"] == []

    assert _run(workspace, "perturb", "--checkpoint", out / "trained.npz", "--corpus", out / "corpus.tsv",
                *embeddings) == 0
    for line in (out / "perturb.jsonl").read_text().splitlines():
        assert json.loads(line)["step"] == 3


def test_checkpoint_from_another_map_is_rejected(workspace, capsys):
    out = workspace / "out"
    assert _run(workspace, "gen-synth", "--per-group", 1) == 0
    assert _run(workspace, "baseline", "trep-ll", "--corpus", out / "corpus.tsv") == 0
    (workspace / "map.txt").write_text("......\n" * 6)
    assert _run(workspace, "encode", "--checkpoint", out / "baseline-trep-ll.npz", "--corpus",
                out / "corpus.tsv") == 3
    assert "different map" in capsys.readouterr().err
