import json
import struct
from pathlib import Path

import numpy as np
import pytest

from alcore.cli import main
from alcore.volume import VoxelGrid, save_volume

DATA = Path(__file__).parent / "data"


def run(*argv) -> int:
    return main(list(argv))


# --- score ---------------------------------------------------------------------

def test_score_margins_matches_golden(tmp_path):
    out = tmp_path / "scores.csv"
    code = run("score", "--method", "margins", "--maps", str(DATA / "score_margins"),
               "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_margins.csv").read_bytes()


def test_score_bootstrap_matches_golden(tmp_path):
    out = tmp_path / "scores.csv"
    code = run("score", "--method", "bootstrap", "--maps", str(DATA / "score_ensemble"),
               "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_bootstrap.csv").read_bytes()


def test_score_dropout_matches_golden(tmp_path):
    out = tmp_path / "scores.csv"
    code = run("score", "--method", "dropout", "--maps", str(DATA / "score_ensemble"),
               "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_dropout.csv").read_bytes()


def test_score_dropout_full_fraction_equals_bootstrap(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    run("score", "--method", "dropout", "--top-fraction", "1.0",
        "--maps", str(DATA / "score_ensemble"), "--out", str(a))
    run("score", "--method", "bootstrap", "--maps", str(DATA / "score_ensemble"),
        "--out", str(b))
    # identical numbers, only the method column differs
    assert a.read_text().replace("dropout", "bootstrap") == b.read_text()


def test_score_margins_rejects_ensembles(tmp_path, capsys):
    code = run("score", "--method", "margins", "--maps", str(DATA / "score_ensemble"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "exactly one map" in capsys.readouterr().err


def test_score_missing_maps_dir(tmp_path, capsys):
    code = run("score", "--method", "margins", "--maps", str(tmp_path / "nope"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1


def test_score_item_without_maps(tmp_path, capsys):
    (tmp_path / "maps" / "empty_item").mkdir(parents=True)
    code = run("score", "--method", "margins", "--maps", str(tmp_path / "maps"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "no pred_" in capsys.readouterr().err


def test_score_mixed_dims_within_item(tmp_path, capsys):
    d = tmp_path / "maps" / "item"
    d.mkdir(parents=True)
    save_volume(VoxelGrid(np.zeros((2, 2, 2))), d / "pred_0.vol")
    save_volume(VoxelGrid(np.zeros((2, 2, 3))), d / "pred_1.vol")
    code = run("score", "--method", "bootstrap", "--maps", str(tmp_path / "maps"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "dims" in capsys.readouterr().err


def test_score_corrupt_volume_reports_offset(tmp_path, capsys):
    d = tmp_path / "maps" / "item"
    d.mkdir(parents=True)
    (d / "pred_0.vol").write_bytes(b"JUNKxxxx")
    code = run("score", "--method", "margins", "--maps", str(tmp_path / "maps"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "byte offset 0" in capsys.readouterr().err


# --- select ---------------------------------------------------------------------

def test_select_topk_matches_golden(tmp_path):
    out = tmp_path / "sel.json"
    code = run("select", "--strategy", "topk", "--scores", str(DATA / "select_scores.csv"),
               "--m", "3", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_topk.json").read_bytes()


def test_select_representative_matches_golden(tmp_path):
    out = tmp_path / "sel.json"
    code = run("select", "--strategy", "representative",
               "--scores", str(DATA / "select_scores.csv"),
               "--features", str(DATA / "select_features.csv"),
               "--k", "5", "--m", "3", "--seed", "7", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_representative.json").read_bytes()


def test_select_nonsimilar_matches_golden(tmp_path):
    out = tmp_path / "sel.json"
    code = run("select", "--strategy", "nonsimilar",
               "--scores", str(DATA / "select_scores.csv"),
               "--features", str(DATA / "select_features.csv"),
               "--annotated", str(DATA / "select_annotated.csv"),
               "--k", "5", "--m", "3", "--seed", "7", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_nonsimilar.json").read_bytes()


def test_select_random_matches_golden(tmp_path):
    out = tmp_path / "sel.json"
    code = run("select", "--strategy", "random", "--scores", str(DATA / "select_scores.csv"),
               "--m", "3", "--seed", "7", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_random.json").read_bytes()


def test_select_id_lines_format(tmp_path):
    out = tmp_path / "sel.txt"
    code = run("select", "--strategy", "random", "--scores", str(DATA / "select_scores.csv"),
               "--m", "3", "--seed", "7", "--format", "ids", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_random_ids.txt").read_bytes()


def test_select_m_exceeding_k_fails(tmp_path, capsys):
    code = run("select", "--strategy", "representative",
               "--scores", str(DATA / "select_scores.csv"),
               "--features", str(DATA / "select_features.csv"),
               "--k", "2", "--m", "3", "--out", str(tmp_path / "x.json"))
    assert code == 1
    assert "exceeds" in capsys.readouterr().err


def test_select_k_exceeding_pool_fails(tmp_path, capsys):
    code = run("select", "--strategy", "representative",
               "--scores", str(DATA / "select_scores.csv"),
               "--features", str(DATA / "select_features.csv"),
               "--k", "99", "--m", "3", "--out", str(tmp_path / "x.json"))
    assert code == 1
    assert "exceeds" in capsys.readouterr().err


def test_select_missing_inputs_is_usage_error(tmp_path, capsys):
    code = run("select", "--strategy", "topk", "--m", "3", "--out", str(tmp_path / "x.json"))
    assert code == 2
    assert "usage error" in capsys.readouterr().err


def test_select_topk_whole_pool(tmp_path):
    out = tmp_path / "sel.json"
    code = run("select", "--strategy", "topk", "--scores", str(DATA / "select_scores.csv"),
               "--m", "6", "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["chosen"] == [f"s{k}" for k in range(6)]  # already rank-ordered


# --- init -----------------------------------------------------------------------

def test_init_diverse_matches_golden(tmp_path):
    out = tmp_path / "init.json"
    code = run("init", "--features", str(DATA / "init_features.csv"),
               "--n", "4", "--mode", "diverse", "--seed", "3", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_init_diverse.json").read_bytes()


def test_init_random_matches_golden(tmp_path):
    out = tmp_path / "init.json"
    code = run("init", "--features", str(DATA / "init_features.csv"),
               "--n", "4", "--mode", "random", "--seed", "3", "--out", str(out))
    assert code == 0
    assert out.read_bytes() == (DATA / "golden_init_random.json").read_bytes()


def test_init_n_equals_rows_returns_all(tmp_path):
    out = tmp_path / "init.json"
    code = run("init", "--features", str(DATA / "init_features.csv"),
               "--n", "8", "--mode", "diverse", "--seed", "0", "--out", str(out))
    assert code == 0
    assert sorted(json.loads(out.read_text())["chosen"]) == [f"p{k}" for k in range(8)]


def test_init_oversized_n_fails(tmp_path, capsys):
    code = run("init", "--features", str(DATA / "init_features.csv"),
               "--n", "9", "--mode", "diverse", "--seed", "0",
               "--out", str(tmp_path / "x.json"))
    assert code == 1


def test_init_repeat_identical(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    for out in (a, b):
        run("init", "--features", str(DATA / "init_features.csv"),
            "--n", "3", "--mode", "diverse", "--seed", "11", "--out", str(out))
    assert a.read_bytes() == b.read_bytes()


# --- features ---------------------------------------------------------------------

def _write_volume_dir(root: Path, items: dict) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for item_id, values in items.items():
        save_volume(VoxelGrid(np.asarray(values, dtype=float)), root / f"{item_id}.vol")


def test_features_extraction(tmp_path, rng):
    vols = {f"i{k}": rng.random((3, 3, 3)) for k in range(3)}
    _write_volume_dir(tmp_path / "vols", vols)
    out = tmp_path / "features.csv"
    code = run("features", "--volumes", str(tmp_path / "vols"), "--out", str(out))
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "item_id,mean,median,entropy,energy"
    assert len(lines) == 4


def test_features_with_masks_and_normalize(tmp_path, rng):
    vols = {f"i{k}": rng.random((3, 3, 3)) for k in range(3)}
    masks = {f"i{k}": (rng.random((3, 3, 3)) < 0.7).astype(float) for k in range(3)}
    _write_volume_dir(tmp_path / "vols", vols)
    _write_volume_dir(tmp_path / "masks", masks)
    out = tmp_path / "norm.csv"
    code = run("features", "--volumes", str(tmp_path / "vols"),
               "--masks", str(tmp_path / "masks"), "--normalize", "--out", str(out))
    assert code == 0
    rows = out.read_text().splitlines()[1:]
    cols = np.array([[float(x) for x in r.split(",")[1:]] for r in rows])
    assert np.abs(cols.mean(axis=0)).max() < 1e-9


def test_features_missing_mask_fails(tmp_path, rng):
    _write_volume_dir(tmp_path / "vols", {"a": rng.random((2, 2, 2))})
    (tmp_path / "masks").mkdir()
    save_volume(VoxelGrid(np.ones((2, 2, 2))), tmp_path / "masks" / "b.vol")
    code = run("features", "--volumes", str(tmp_path / "vols"),
               "--masks", str(tmp_path / "masks"), "--out", str(tmp_path / "x.csv"))
    assert code == 1


# --- dice -----------------------------------------------------------------------

def test_dice_command(tmp_path):
    pred = np.zeros((1, 1, 4))
    truth = np.zeros((1, 1, 4))
    pred[0, 0, [0, 1]] = 1.0
    truth[0, 0, [1, 2]] = 1.0
    _write_volume_dir(tmp_path / "pred", {"a": pred, "b": truth})
    _write_volume_dir(tmp_path / "truth", {"a": truth, "b": truth})
    out = tmp_path / "dice.csv"
    code = run("dice", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
               "--out", str(out))
    assert code == 0
    assert out.read_text() == "item_id,dice\na,0.5\nb,1\n"


def test_dice_missing_truth_fails(tmp_path):
    _write_volume_dir(tmp_path / "pred", {"a": np.zeros((1, 1, 2))})
    (tmp_path / "truth").mkdir()
    save_volume(VoxelGrid(np.zeros((1, 1, 2))), tmp_path / "truth" / "b.vol")
    code = run("dice", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1


def test_dice_nonbinary_volume_fails(tmp_path, capsys):
    _write_volume_dir(tmp_path / "pred", {"a": np.full((1, 1, 2), 0.5)})
    _write_volume_dir(tmp_path / "truth", {"a": np.zeros((1, 1, 2))})
    code = run("dice", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
               "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "0 or 1" in capsys.readouterr().err


# --- simulate / compare --------------------------------------------------------------

def test_simulate_matches_golden_chosen_sequence(tmp_path):
    out = tmp_path / "run.jsonl"
    code = run("simulate", "--config", str(DATA / "simulate_config.json"), "--out", str(out))
    assert code == 0
    lines = out.read_text().splitlines()
    chosen = [json.loads(l)["selection"]["chosen"] for l in lines[1:]]
    golden = json.loads((DATA / "golden_simulate_chosen.json").read_text())
    assert chosen == golden


def test_simulate_zero_iterations(tmp_path):
    cfg = json.loads((DATA / "simulate_config.json").read_text())
    cfg["iterations"] = 0
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "run.jsonl"
    assert run("simulate", "--config", str(cfg_path), "--out", str(out)) == 0
    assert len(out.read_text().splitlines()) == 2  # config echo + initial point


def test_simulate_rerun_byte_identical(tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    for out in (a, b):
        run("simulate", "--config", str(DATA / "simulate_config.json"), "--out", str(out))
    assert a.read_bytes() == b.read_bytes()


def test_simulate_timing_flag_adds_wall_time(tmp_path):
    out = tmp_path / "run.jsonl"
    run("simulate", "--config", str(DATA / "simulate_config.json"), "--out", str(out),
        "--timing")
    rec = json.loads(out.read_text().splitlines()[1])
    assert "wall_time_s" in rec


def test_simulate_config_errors_listed_per_field(tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"pool_size": "x", "strategy": "nope", "extra": 1}))
    code = run("simulate", "--config", str(cfg_path), "--out", str(tmp_path / "run.jsonl"))
    assert code == 1
    err = capsys.readouterr().err
    assert "pool_size" in err and "strategy" in err and "extra" in err


def test_compare_command(tmp_path):
    base = json.loads((DATA / "simulate_config.json").read_text())
    base["iterations"] = 1
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    for strategy in ("random", "topk"):
        cfg = dict(base)
        cfg["strategy"] = strategy
        (cfg_dir / f"{strategy}.json").write_text(json.dumps(cfg))
    out_dir = tmp_path / "report"
    code = run("compare", "--configs", str(cfg_dir), "--repeats", "2",
               "--target", "0.5", "--out", str(out_dir))
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert set(report["labels"]) == {"random", "topk"}
    curves = (out_dir / "curves.csv").read_text().splitlines()
    assert curves[0] == "label,iteration,annotated_count,fraction,mean_dice,std_dice"
    assert len(curves) == 1 + 2 * 2  # two labels, two points each
    summary = (out_dir / "summary.csv").read_text().splitlines()
    assert summary[0] == "label,repeats_reached,mean_count_to_target,fraction_to_target"


# --- usage behavior ---------------------------------------------------------------

def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["score", "--method", "margins", "--maps", "x", "--out", "y", "--bogus"])
    assert err.value.code == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["score", "--method", "margins"])
    assert err.value.code == 2


def test_subcommand_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as err:
        main(["select", "--help"])
    assert err.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--strategy", "--scores", "--features", "--annotated",
                 "--k", "--m", "--seed", "--out", "--format"):
        assert flag in out
