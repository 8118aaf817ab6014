import csv
import json

import numpy as np
import pytest

from steerkit.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_OK, main
from steerkit.config import RunConfig
from steerkit.errors import DegenerateInput, InvalidConfig
from steerkit.learners import ConceptSubspace
from steerkit.pipeline import STAGES, emit_projection

TINY = {
    "n_concepts": 2,
    "n_train": 24,
    "n_eval": 12,
    "methods": ["diffmean", "pca", "lat", "probe", "sae", "sae_a", "bow", "ixg"],
    "steer_methods": ["diffmean", "sae"],
    "train": {"probe": {"epochs": 4, "batch_size": 8, "lr": 0.05}},
    "n_instructions": 2,
    "max_new": 6,
    "negative_pool": 8,
    "extra_negatives": 16,
    "ig_steps": 4,
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(tiny_config), "--out", str(out)]) == EXIT_OK
    return out


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestRun:
    def test_artifacts(self, tiny_run):
        for rel in (
            "config.json",
            "concepts.jsonl",
            "detect/detection.csv",
            "detect/detection.jsonl",
            "steer/steering.csv",
            "steer/generations.jsonl",
            "steer/selection.csv",
            "steer/winrate.csv",
            "report/summary.json",
            "report/summary.md",
            "report/projection_diffmean.csv",
            "MANIFEST.json",
        ):
            assert (tiny_run / rel).is_file(), rel

    def test_csv_columns(self, tiny_run):
        assert read_csv(tiny_run / "steer/steering.csv")[0] == ["method", "concept", "factor", "c", "i", "f", "overall"]
        det = read_csv(tiny_run / "detect/detection.csv")
        assert det[0] == ["concept_id", "method", "auroc", "f1_balanced", "f1_imbalanced"]
        assert {r[1] for r in det[1:]} == set(TINY["methods"])
        proj = read_csv(tiny_run / "report/projection_diffmean.csv")
        assert proj[0] == ["concept_id", "pc1", "pc2"] and len(proj) == 3

    def test_manifest_checksums(self, tiny_run):
        from steerkit.pipeline import sha256_file

        man = json.loads((tiny_run / "MANIFEST.json").read_text())
        assert man["complete"] and man["stages"] == list(STAGES)
        for a in man["artifacts"]:
            assert sha256_file(tiny_run / a["path"]) == a["sha256"]

    def test_stages_one_by_one_match_run(self, tiny_config, tiny_run, tmp_path):
        for st in STAGES:
            args = [st, "--out", str(tmp_path)] + (["--config", str(tiny_config)] if st == "gen" else [])
            assert main(args) == EXIT_OK
        for rel in ("detect/detection.csv", "steer/steering.csv", "steer/generations.jsonl"):
            assert (tmp_path / rel).read_bytes() == (tiny_run / rel).read_bytes()
        assert json.loads((tmp_path / "MANIFEST.json").read_text())["complete"]

    def test_jobs_do_not_change_results(self, tiny_config, tiny_run, tmp_path):
        assert main(["gen", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
        for st in ("collect", "train", "detect"):
            assert main([st, "--out", str(tmp_path), "--jobs", "2"]) == EXIT_OK
        assert (tmp_path / "detect/detection.csv").read_bytes() == (tiny_run / "detect/detection.csv").read_bytes()


class TestExitCodes:
    def test_unknown_method_is_run_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY, "methods": ["diffmean", "telepathy"]}))
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_ERROR
        assert "telepathy" in capsys.readouterr().err
        assert not (out / "dict").exists()

    def test_invalid_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layer": 7}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": "blue"}))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_bad_flags(self):
        assert main(["run", "--seed", "-1"]) == 2
        assert main(["frobnicate"]) == 2

    def test_stage_without_gen(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path / "empty")]) == EXIT_ERROR
        assert "run gen first" in capsys.readouterr().err

    def test_failure_leaves_incomplete_manifest(self, tiny_config, tmp_path, capsys):
        assert main(["gen", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
        # detect before collect/train: the stage fails and says where
        assert main(["detect", "--out", str(tmp_path)]) == EXIT_ERROR
        assert "[detect]" in capsys.readouterr().err
        man = json.loads((tmp_path / "MANIFEST.json").read_text())
        assert not man["complete"] and man["error"]


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = RunConfig.from_json(TINY)
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json").to_json() == cfg.to_json()

    def test_overrides(self, tiny_config):
        cfg = RunConfig.load(tiny_config, seed=9, out="elsewhere")
        assert cfg.seed == 9 and cfg.out == "elsewhere"

    @pytest.mark.parametrize("bad", [{"seed": -1}, {"pooling": "median"}, {"n_train": 7}, {"train": {"bow": {}}}, {"concepts_file": "/nonexistent"}])
    def test_invalid(self, bad):
        with pytest.raises(InvalidConfig):
            RunConfig.from_json(bad)


class TestProjection:
    def test_antipodal(self):
        v = np.array([0.6, 0.8, 0.0])
        rows = emit_projection([ConceptSubspace(v, "x", "a"), ConceptSubspace(-v, "x", "b")])
        assert abs(rows[0][1] + rows[1][1]) < 1e-12 and abs(abs(rows[0][1]) - 1.0) < 1e-12
        assert rows[0][2] == rows[1][2] == 0.0

    def test_matches_dense_pca(self, rng):
        W = rng.standard_normal((6, 5))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        rows = emit_projection([ConceptSubspace(w, "x", f"c{i}") for i, w in enumerate(W)])
        assert len(rows) == 6
        Xc = W - W.mean(0)
        vecs = np.linalg.eigh(Xc.T @ Xc)[1]
        for k, col in ((1, -1), (2, -2)):
            ours = np.array([r[k] for r in rows])
            ref = Xc @ vecs[:, col]
            assert min(np.abs(ours - ref).max(), np.abs(ours + ref).max()) < 1e-6

    def test_needs_two(self):
        with pytest.raises(DegenerateInput):
            emit_projection([ConceptSubspace(np.array([1.0, 0.0]), "x")])
