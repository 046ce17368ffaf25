# tests/test_cli.py
import json

import numpy as np
import pytest

from src.cli import build_parser, main
from src.nncore.checkpoint import save_checkpoint
from src.run_config import load_run_config
from src.train import build_ipgn, ipgn_config
from src.volume import load_volume

SMALL_CONFIG = {
    "seed": 5,
    "num_classes": 4,
    "synth": {"depth": 2, "grid": 24, "radius_range": [1.5, 2.0]},
    "train": {"point_epochs": 1, "graph_epochs": 1, "joint_epochs": 1, "num_points": 64, "num_implicit_points": 16},
    "fusion": {"num_layers": 2, "width": 8, "heads": 2, "ball_radius": 0.3, "max_ball_points": 6,
               "implicit_widths": [16, 8]},
    "encoder": {
        "point_levels": [{"centroid_ratio": 0.25, "radius": 0.4, "widths": [8, 8], "group_size": 6}],
        "graph_layers": 2, "graph_heads": 2, "graph_hidden": 8, "out_width": 8,
    },
    "eval": {"repeats": 1},
    "paths": {"num_trees": 2},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


@pytest.fixture
def dataset(tmp_path, config_path):
    out = tmp_path / "data"
    assert main(["synth", "--config", config_path, "--out", str(out)]) == 0
    return out


def _error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_help_lists_common_flags(capsys):
    with pytest.raises(SystemExit) as exit_info:
        build_parser().parse_args(["synth", "--help"])
    assert exit_info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--threads", "--out", "--n"):
        assert flag in text


def test_synth_is_reproducible(tmp_path, config_path):
    for name in ("a", "b"):
        assert main(["synth", "--config", config_path, "--n", "2", "--out", str(tmp_path / name)]) == 0
    for rel in ("manifest.json", "trees/tree_001.u8", "trees/tree_001.graph.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    provenance = json.loads((tmp_path / "a" / "provenance.json").read_text())
    assert provenance["command"] == "synth"
    assert provenance["config"]["seed"] == 5


def test_seed_flag_changes_the_data(tmp_path, config_path):
    main(["synth", "--config", config_path, "--n", "1", "--out", str(tmp_path / "a")])
    main(["synth", "--config", config_path, "--n", "1", "--seed", "6", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "trees/tree_000.u8").read_bytes() != (tmp_path / "b" / "trees/tree_000.u8").read_bytes()


def test_skeletonize_writes_graph(dataset, tmp_path, config_path):
    out = tmp_path / "g.graph.json"
    volume = dataset / "trees" / "tree_000.json"
    assert main(["skeletonize", "--config", config_path, "--volume", str(volume), "--out", str(out)]) == 0
    graph = json.loads(out.read_text())
    assert graph["nodes"] and graph["transform"] is not None


def test_eval_of_truth_is_perfect(dataset, tmp_path, config_path):
    volume = str(dataset / "trees" / "tree_000.json")
    graph = str(dataset / "trees" / "tree_000.graph.json")
    code = main(["eval", "--config", config_path, "--pred", volume, "--truth", volume,
                 "--pred-graph", graph, "--truth-graph", graph, "--out", str(tmp_path / "eval")])
    assert code == 0
    report = json.loads((tmp_path / "eval" / "eval.json").read_text())
    assert report["point_accuracy"] == 100.0
    assert report["node_accuracy"] == 100.0
    assert report["provenance"]["command"] == "eval"


def test_reconstruct_labels_the_foreground(dataset, tmp_path, config_path):
    cfg = load_run_config(config_path)
    model = build_ipgn(cfg.fusion, cfg.encoder)
    checkpoint = save_checkpoint(model, tmp_path / "ipgn.json", ipgn_config(model, cfg.encoder))

    volume = dataset / "trees" / "tree_000.json"
    pred_path = tmp_path / "pred.json"
    code = main(["reconstruct", "--config", config_path, "--checkpoint", str(checkpoint),
                 "--volume", str(volume), "--out", str(pred_path),
                 "--ply", str(tmp_path / "pred.ply"), "--csv", str(tmp_path / "pred.csv"),
                 "--threads", "1"])
    assert code == 0
    truth = load_volume(volume)
    pred = load_volume(pred_path)
    np.testing.assert_array_equal(pred.data > 0, truth.data > 0)
    assert (tmp_path / "pred.ply").exists() and (tmp_path / "pred.csv").exists()


def test_gradcheck_command_passes(tmp_path, config_path):
    code = main(["gradcheck", "--config", config_path, "--points", "32", "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] is True


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"synth": {"colour": "red"}}))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    error = _error(capsys)
    assert error["error"] == "config_error"
    assert "colour" in error["message"]


def test_missing_volume_exits_1(tmp_path, config_path, capsys):
    assert main(["skeletonize", "--config", config_path, "--volume", str(tmp_path / "none.json")]) == 1
    assert _error(capsys)["error"] == "file_not_found"


def test_malformed_volume_exits_1(tmp_path, config_path, capsys):
    vol_path = tmp_path / "v.json"
    vol_path.write_text(json.dumps({"dims": [2, 2, 2], "spacing": [1, 1, 1], "num_classes": 4, "blob": "v.u8"}))
    (tmp_path / "v.u8").write_bytes(b"\x00" * 3)
    assert main(["skeletonize", "--config", config_path, "--volume", str(vol_path)]) == 1
    assert _error(capsys)["error"] == "volume_format"


def test_negative_threads_is_a_config_error(tmp_path, config_path):
    assert main(["synth", "--config", config_path, "--threads", "-1", "--out", str(tmp_path)]) == 2


def test_non_integer_seed_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": "abc"}))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert _error(capsys)["error"] == "config_error"


def test_corrupt_checkpoint_exits_1(dataset, tmp_path, config_path, capsys):
    checkpoint = tmp_path / "ipgn.json"
    checkpoint.write_text("{not json")
    code = main(["reconstruct", "--config", config_path, "--checkpoint", str(checkpoint),
                 "--volume", str(dataset / "trees" / "tree_000.json"), "--out", str(tmp_path / "p.json")])
    assert code == 1
    assert _error(capsys)["error"] == "checkpoint_error"


def test_corrupt_manifest_exits_1(tmp_path, config_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    (data / "manifest.json").write_text("[1, 2")
    code = main(["train", "--config", config_path, "--data", str(data), "--out", str(tmp_path / "run")])
    assert code == 1
    assert _error(capsys)["error"] == "synth_error"


def test_unwritable_output_path_exits_1(tmp_path, config_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["synth", "--config", config_path, "--n", "1", "--out", str(blocker / "data")])
    assert code == 1
    assert _error(capsys)["error"] == "io_error"


def _pipeline(config_path: str, root) -> None:
    data, run = root / "data", root / "run"
    common = ["--config", config_path, "--threads", "1"]
    assert main(["synth", *common, "--n", "4", "--out", str(data)]) == 0
    assert main(["train", *common, "--data", str(data), "--out", str(run)]) == 0
    truth = str(data / "trees" / "tree_000.json")
    assert main(["reconstruct", *common, "--checkpoint", str(run / "ipgn.json"),
                 "--volume", truth, "--out", str(root / "pred.json")]) == 0
    assert main(["eval", *common, "--pred", str(root / "pred.json"), "--truth", truth,
                 "--out", str(root / "eval")]) == 0


@pytest.mark.slow
def test_seeded_pipeline_runs_are_byte_identical(tmp_path, config_path):
    for name in ("a", "b"):
        _pipeline(config_path, tmp_path / name)

    for rel in ("run/point_encoder.json", "run/point_encoder.f32", "run/graph_encoder.json",
                "run/graph_encoder.f32", "run/ipgn.json", "run/ipgn.f32", "run/train_log.csv",
                "pred.json", "pred.u8", "eval/eval.txt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    reports = [json.loads((tmp_path / name / "eval" / "eval.json").read_text()) for name in ("a", "b")]
    for report in reports:
        report.pop("provenance")
    assert reports[0] == reports[1]
