import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lrbench.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, dispatch
from lrbench.degrade import load_image, save_image
from lrbench.matio import save_matrix
from lrbench.metrics import compute_all, read_cells_csv
from lrbench.results import ingest
from lrbench.synthetic import procedural_images
from lrbench.zeroshot import l2_normalize

SUBCOMMANDS = ["ingest", "metrics", "optimize-weights", "rank", "degrade", "eval-zeroshot",
               "train-lrtk", "layer-sim", "report"]
SMALL_MODEL = {"input_res": 16, "patch_size": 8, "dim": 8, "depth": 2, "heads": 2, "embed_dim_out": 8}


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture
def golden(data_dir):
    return data_dir / "abnormal_robustness.csv"


@pytest.fixture
def synthetic_results(tmp_path):
    """Five datasets, ten models, HR plus all four low resolutions."""
    rng = np.random.default_rng(0)
    dsets = ["imagenet", "imagenet-v2", "dtd", "imagenet-a", "eurosat"]
    models = [f"m{i}" for i in range(10)]
    (tmp_path / "datasets.json").write_text(json.dumps([{"id": d, "num_classes": 10} for d in dsets]))
    (tmp_path / "models.json").write_text(json.dumps(
        [{"id": m, "backbone": "b", "hr_resolution": 224} for m in models]))
    lines = ["model_id,backbone_id,dataset_id,resolution,top1"]
    for m in models:
        for d in dsets:
            hr = rng.uniform(0.3, 0.9)
            lines.append(f"{m},b,{d},224,{hr:.4f}")
            for n in (16, 32, 64, 128):
                lines.append(f"{m},b,{d},{n},{hr * rng.uniform(0.2, 1.0):.4f}")
    (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / "r.csv"


def test_unknown_and_missing_subcommand(capsys):
    assert dispatch(["bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert dispatch([]) == EXIT_USAGE
    assert dispatch(["metrics", "--no-such-flag"]) == EXIT_USAGE


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_everywhere(cmd, capsys):
    assert dispatch([cmd, "--help"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "--seed" in out and "--threads" in out


def test_parser_lists_all_subcommands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)


def test_metrics_happy_path(tmp_path, golden, data_dir):
    weights = {"aircraft": 1.0, "cars": 0.5, "eurosat": 0.25}
    (tmp_path / "w.json").write_text(json.dumps(weights))
    assert dispatch(["metrics", "--results", str(golden), "--alpha", "200",
                     "--weights", str(tmp_path / "w.json"), "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "scores.csv").exists()
    cfg = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert cfg["alpha"] == 200 and cfg["weights_resolved"] == weights and cfg["seed"] == 0


def test_golden_pipeline_matches_library(tmp_path, golden):
    assert dispatch(["ingest", str(golden), "--out", str(tmp_path / "t" / "table.csv")]) == 0
    # the normalized table keeps its meta files alongside
    for name in ("datasets.json", "models.json"):
        (tmp_path / "t" / name).write_bytes((golden.parent / name).read_bytes())
    assert dispatch(["metrics", "--results", str(tmp_path / "t" / "table.csv"),
                     "--out-dir", str(tmp_path / "m")]) == 0
    cells = {(c.model_id, c.dataset_id, c.resolution): c for c in read_cells_csv(tmp_path / "m" / "cells.csv").cells}
    scores, _ = compute_all(ingest(golden))
    assert len(cells) == len(scores.cells) == 56
    for c in scores.cells:
        assert cells[(c.model_id, c.dataset_id, c.resolution)].gamma_improved == c.gamma_improved
    spot = cells[("albef-4m", "aircraft", 16)]
    assert round(100 * spot.gamma_improved, 1) == 2.1


def test_malformed_csv_exit_1(tmp_path, data_dir, capsys):
    for name in ("datasets.json", "models.json"):
        (tmp_path / name).write_bytes((data_dir / name).read_bytes())
    (tmp_path / "bad.csv").write_text("model_id,backbone_id,dataset_id,resolution,top1\n"
                                      "albef-4m,b,cars,224,0.5\nalbef-4m,b,cars,16,oops\n")
    assert dispatch(["metrics", "--results", str(tmp_path / "bad.csv"), "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert "row 2" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert dispatch(["metrics", "--results", str(tmp_path / "none.csv")]) == EXIT_IO
    assert dispatch(["degrade", str(tmp_path / "none.png"), str(tmp_path / "o.png")]) == EXIT_IO


def test_optimize_and_rank_idempotent(tmp_path, synthetic_results):
    assert dispatch(["metrics", "--results", str(synthetic_results), "--out-dir", str(tmp_path / "m")]) == 0
    cells = str(tmp_path / "m" / "cells.csv")
    runs = []
    out = tmp_path / "w"
    for _ in range(2):
        assert dispatch(["optimize-weights", "--cells", cells, "--budget", "200", "--seed", "3",
                         "--out", str(out / "weights.json")]) == 0
        assert dispatch(["rank", "--cells", cells, "--weights", str(out / "weights.json"),
                         "--out", str(out / "ranking.csv")]) == 0
        runs.append(files(out))
    assert runs[0] == runs[1]
    assert {"weights.json", "trace.csv", "ranking.csv", "correlations.json", "run_config.json"} <= set(runs[0])
    w = json.loads(runs[0]["weights.json"])
    assert set(w) == {"imagenet", "imagenet-v2", "dtd", "imagenet-a", "eurosat"}
    cfg = json.loads(runs[0]["run_config.json"])
    assert "time" not in json.dumps(cfg).lower()


def test_optimize_bad_objective(tmp_path, synthetic_results):
    dispatch(["metrics", "--results", str(synthetic_results), "--out-dir", str(tmp_path)])
    assert dispatch(["optimize-weights", "--cells", str(tmp_path / "cells.csv"),
                     "--objective", "nope:1", "--out", str(tmp_path / "w.json")]) == EXIT_INVALID
    assert dispatch(["optimize-weights", "--cells", str(tmp_path / "cells.csv"),
                     "--bounds", "0.9,0.1", "--out", str(tmp_path / "w.json")]) == EXIT_INVALID


def test_degrade(tmp_path):
    img = procedural_images(1, 64, seed=0)[0]
    save_image(tmp_path / "in.png", img)
    snaps = []
    for _ in range(2):
        assert dispatch(["degrade", "--n", "16", "--model-res", "48", str(tmp_path / "in.png"),
                         str(tmp_path / "o" / "out.png")]) == 0
        snaps.append(files(tmp_path / "o"))
    assert snaps[0] == snaps[1]
    assert load_image(tmp_path / "o" / "out.png").shape == (48, 48, 3)


def test_eval_zeroshot(tmp_path, capsys):
    rng = np.random.default_rng(0)
    classes = l2_normalize(rng.standard_normal((4, 8)))
    labels = [0, 1, 2, 3, 1]
    imgs = l2_normalize(classes[labels] + 0.05 * rng.standard_normal((5, 8)))
    save_matrix(tmp_path / "img.f32", imgs, True)
    save_matrix(tmp_path / "cls.f32", classes, True)
    (tmp_path / "labels.json").write_text(json.dumps(labels))
    assert dispatch(["eval-zeroshot", "--images-emb", str(tmp_path / "img.f32"), "--classes-emb",
                     str(tmp_path / "cls.f32"), "--labels", str(tmp_path / "labels.json"), "--k", "2",
                     "--out", str(tmp_path / "o" / "z.json")]) == 0
    res = json.loads((tmp_path / "o" / "z.json").read_text())
    assert res["accuracy"] == {"top1": 1.0, "top2": 1.0}
    assert [p[0] for p in res["predictions"]] == labels
    assert dispatch(["eval-zeroshot", "--images-emb", str(tmp_path / "img.f32")]) == EXIT_USAGE


def test_eval_zeroshot_from_text_table(tmp_path):
    names = ["cat", "dog"]
    templates = ["a [L]", "the [L]"]
    keys = [t.replace("[L]", n) for n in names for t in templates]
    save_matrix(tmp_path / "text.f32", np.array([[1, 0], [1, 0.1], [0, 1], [0.1, 1]]), keys=keys)
    (tmp_path / "names.json").write_text(json.dumps(names))
    (tmp_path / "t.json").write_text(json.dumps({"dataset_id": "pets", "templates": templates}))
    save_matrix(tmp_path / "img.f32", np.array([[0.0, 1.0], [1.0, 0.0]]), True)
    assert dispatch(["eval-zeroshot", "--images-emb", str(tmp_path / "img.f32"), "--text-emb",
                     str(tmp_path / "text.f32"), "--class-names", str(tmp_path / "names.json"),
                     "--templates", str(tmp_path / "t.json"), "--labels", "/dev/null", "--k", "1",
                     "--out", str(tmp_path / "z.json")]) == EXIT_INVALID  # label count mismatch
    (tmp_path / "labels.txt").write_text("1 0\n")
    assert dispatch(["eval-zeroshot", "--images-emb", str(tmp_path / "img.f32"), "--text-emb",
                     str(tmp_path / "text.f32"), "--class-names", str(tmp_path / "names.json"),
                     "--templates", str(tmp_path / "t.json"), "--labels", str(tmp_path / "labels.txt"),
                     "--k", "1", "--out", str(tmp_path / "z.json")]) == 0
    assert json.loads((tmp_path / "z.json").read_text())["accuracy"]["top1"] == 1.0


def test_train_then_layer_sim_then_report(tmp_path, golden, monkeypatch):
    monkeypatch.setenv("LRBENCH_THREADS", "1")
    (tmp_path / "cfg.json").write_text(json.dumps(
        {"model": SMALL_MODEL, "num_images": 4, "source_res": 32, "buckets": "4:8,8:16"}))
    outs = []
    out = tmp_path / "train0"
    for _ in range(2):
        assert dispatch(["train-lrtk", "--config", str(tmp_path / "cfg.json"), "--steps", "5",
                         "--seed", "2", "--start-block", "0", "--out-dir", str(out)]) == 0
        outs.append(files(out))
    assert outs[0] == outs[1]
    run = json.loads(outs[0]["run_config.json"])
    assert run["train"]["steps"] == 5 and run["train"]["model"]["dim"] == 8
    assert run["train"]["buckets"] == [[4, 8], [8, 16]]
    with (tmp_path / "train0" / "log.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 5

    assert dispatch(["layer-sim", "--base", str(tmp_path / "train0" / "base.f32"), "--tokens",
                     str(tmp_path / "train0" / "tokens.f32"), "--n", "4", "8", "--num-images", "3",
                     "--out-dir", str(tmp_path / "ls")]) == 0
    assert (tmp_path / "ls" / "heatmap_8.csv").exists()

    assert dispatch(["metrics", "--results", str(golden), "--out-dir", str(tmp_path / "m")]) == 0
    assert dispatch(["report", "--scores", str(tmp_path / "m" / "scores.csv"), "--cells",
                     str(tmp_path / "m" / "cells.csv"), "--heatmap", f"4={tmp_path / 'ls' / 'heatmap_4.csv'}",
                     "--out-dir", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "heatmap_4.csv").exists()
    assert (tmp_path / "rep" / "charts" / "accuracy.svg").exists()
    assert dispatch(["report", "--scores", str(tmp_path / "m" / "scores.csv"), "--cells",
                     str(tmp_path / "m" / "cells.csv"), "--heatmap", "4"]) == EXIT_USAGE


def test_bad_thread_count(golden):
    assert dispatch(["metrics", "--results", str(golden), "--threads", "0"]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lrbench", "nope"], capture_output=True, text=True)
    assert proc.returncode == 64
