"""Config validation, pipeline caching/determinism, CLI exit codes."""

import json
import os

import numpy as np
import pytest

import quantsep.cli as cli
import quantsep.config as cfgmod
from quantsep.pipeline import Pipeline

MICRO = {
    "schema_version": 1,
    "stft": {"n_fft": 128, "win_length": 128, "hop": 64},
    "array": {"positions": [0.0, 0.08], "pairs": [[0, 1]]},
    "mixgen": {"n_scenes": 12, "n_samples": 4160, "seed": 5},
    "model": {"tcn_blocks": 1, "convs_per_block": 2, "bottleneck": 12, "hidden": 16},
    "train": {"steps": 30, "batch_size": 2, "seed": 0},
    "sensitivity": {"m": 1, "probe_scenes": 1},
    "alloc": {"budgets": [4.0]},
    "nas": {"steps": 4, "batch_size": 1, "probe_scenes": 1, "max_rounds": 2},
    "eval": {"timing_runs": 1},
}


@pytest.fixture(scope="module")
def micro_cfg():
    return cfgmod.from_dict(MICRO)


class TestConfig:
    def test_defaults_load(self):
        cfg = cfgmod.from_dict({})
        assert cfg.stft.sample_rate == 16000
        assert cfg.quant.candidates == (2, 4, 8, 16)

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(cfgmod.ConfigError, match="unknown top-level"):
            cfgmod.from_dict({"sftt": {}})

    def test_unknown_nested_key_names_path(self):
        with pytest.raises(cfgmod.ConfigError, match=r"train.*lr_mistyped"):
            cfgmod.from_dict({"train": {"lr_mistyped": 0.1}})

    def test_schema_version_checked(self):
        with pytest.raises(cfgmod.ConfigError, match="schema_version"):
            cfgmod.from_dict({"schema_version": 99})

    def test_non_cola_rejected_at_load(self):
        with pytest.raises(cfgmod.ConfigError, match="COLA"):
            cfgmod.from_dict({"stft": {"hop": 300}})

    def test_hash_stable_and_sensitive(self, micro_cfg):
        assert cfgmod.config_hash(micro_cfg) == cfgmod.config_hash(
            cfgmod.from_dict(MICRO)
        )
        changed = json.loads(json.dumps(MICRO))
        changed["train"]["steps"] = 31
        assert cfgmod.config_hash(cfgmod.from_dict(changed)) != cfgmod.config_hash(
            micro_cfg
        )

    def test_load_file_and_bad_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(MICRO))
        assert cfgmod.load(path).mixgen.n_scenes == 12
        path.write_text("{nope")
        with pytest.raises(cfgmod.ConfigError, match="JSON"):
            cfgmod.load(path)


@pytest.fixture(scope="module")
def pipeline_run(micro_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    pipe = Pipeline(micro_cfg, out, log=None)
    run = pipe.run_all()
    return out, run


class TestPipeline:
    def test_all_artifacts_exist(self, pipeline_run):
        out, _ = pipeline_run
        for rel in (
            "scenes/manifest.json",
            "train/model.json",
            "sensitivity/hes.json",
            "sensitivity/kl.json",
            "alloc/hes_b4.json",
            "alloc/kl_b4.json",
            "nas/nas_b4.json",
            "quant/uniform4.qsep",
            "quant/kl_avg4.qsep",
            "eval/fp32.json",
            "eval/uniform2.csv",
            "report/comparison.csv",
            "report/precision_profile.csv",
            "run.json",
            "timing.json",
        ):
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_rerun_skips_every_stage(self, micro_cfg, pipeline_run):
        out, _ = pipeline_run
        pipe = Pipeline(micro_cfg, out, log=None)
        run = pipe.run_all()
        assert all(rec["skipped"] for rec in run["stages"].values())

    def test_budget_change_reruns_only_downstream(self, pipeline_run, tmp_path):
        import shutil

        src, _ = pipeline_run
        out = str(tmp_path / "copy")
        shutil.copytree(src, out)
        changed = json.loads(json.dumps(MICRO))
        changed["alloc"]["budgets"] = [8.0]
        pipe = Pipeline(cfgmod.from_dict(changed), out, log=None)
        run = pipe.run_all()
        stages = run["stages"]
        assert stages["simulate"]["skipped"]
        assert stages["train"]["skipped"]
        assert stages["sensitivity_hes"]["skipped"]
        assert stages["sensitivity_kl"]["skipped"]
        assert not stages["allocate_hes_b8"]["skipped"]
        assert not stages["evaluate_kl_avg8"]["skipped"]
        # uniform systems depend only on the checkpoint
        assert stages["quantize_uniform4"]["skipped"]

    def test_eval_reports_have_buckets_and_sizes(self, pipeline_run):
        out, _ = pipeline_run
        with open(os.path.join(out, "eval", "uniform4.json")) as f:
            rep = json.load(f)
        assert rep["avg_bits"] == 4.0
        assert set(rep["buckets"]) == {"0", "1", "2", "3"}
        assert rep["model_bytes"] > 0
        with open(os.path.join(out, "eval", "fp32.json")) as f:
            fp = json.load(f)
        assert fp["avg_bits"] == 32.0
        assert fp["model_bytes"] > rep["model_bytes"]

    def test_mixture_baseline_equals_scene_input_snr(self, pipeline_run):
        out, _ = pipeline_run
        with open(os.path.join(out, "eval", "fp32.json")) as f:
            rep = json.load(f)
        for row in rep["per_scene"]:
            assert np.isfinite(row["mixture_si_snr"])
        # the baseline is model-independent
        with open(os.path.join(out, "eval", "uniform2.json")) as f:
            rep2 = json.load(f)
        assert [r["mixture_si_snr"] for r in rep["per_scene"]] == [
            r["mixture_si_snr"] for r in rep2["per_scene"]
        ]

    def test_comparison_csv_row_per_system(self, pipeline_run):
        out, _ = pipeline_run
        with open(os.path.join(out, "report", "comparison.csv")) as f:
            lines = f.read().strip().splitlines()
        systems = [l.split(",")[0] for l in lines[1:]]
        assert systems == [
            "fp32", "uniform2", "uniform4", "uniform8", "uniform16",
            "hes_avg4", "kl_avg4", "nas_avg4",
        ]

    def test_precision_profile_lists_every_cluster(self, pipeline_run, micro_cfg):
        out, _ = pipeline_run
        with open(os.path.join(out, "report", "precision_profile.csv")) as f:
            lines = f.read().strip().splitlines()[1:]
        labels = {l.split(",")[0] for l in lines}
        assert labels == {"hes_b4", "kl_b4", "nas_b4"}
        per_label = [l for l in lines if l.startswith("hes_b4,")]
        assert len(per_label) == 2 + 3 * 2  # proj + head + 3 convs x 2 blocks


class TestDeterminism:
    def test_fresh_reruns_byte_identical(self, micro_cfg, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            Pipeline(micro_cfg, out, log=None).run_all()
            outs.append(out)
        for rel in (
            "report/comparison.csv",
            "report/comparison.json",
            "report/precision_profile.csv",
            "eval/fp32.json",
            "eval/kl_avg4.json",
            "run.json",
            "train/model.bin",
        ):
            a = open(os.path.join(outs[0], rel), "rb").read()
            b = open(os.path.join(outs[1], rel), "rb").read()
            assert a == b, f"{rel} differs between identical runs"


class TestCli:
    def test_simulate_then_train_exit_zero(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MICRO))
        out = str(tmp_path / "run")
        assert cli.main(["simulate", "--config", str(cfg_path), "--out", out,
                         "--quiet"]) == 0
        assert os.path.exists(os.path.join(out, "scenes", "manifest.json"))
        assert cli.main(["train", "--config", str(cfg_path), "--out", out,
                         "--quiet"]) == 0
        with open(os.path.join(out, "run.json")) as f:
            run = json.load(f)
        assert run["stages"]["simulate"]["skipped"]  # reused the cache

    def test_config_error_exit_two(self, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"train": {"nope": 1}}))
        assert cli.main(["train", "--config", str(cfg_path), "--quiet",
                         "--out", str(tmp_path / "r")]) == 2

    def test_missing_config_file_exit_two(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "absent.json"),
                         "--quiet", "--out", str(tmp_path / "r")]) == 2

    def test_numerical_failure_exit_three(self, tmp_path):
        bad = json.loads(json.dumps(MICRO))
        bad["train"]["lr"] = 1e30  # diverges immediately
        cfg_path = tmp_path / "div.json"
        cfg_path.write_text(json.dumps(bad))
        assert cli.main(["train", "--config", str(cfg_path), "--quiet",
                         "--out", str(tmp_path / "r")]) == 3

    def test_seed_override_recorded(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MICRO))
        out = str(tmp_path / "run")
        assert cli.main(["simulate", "--config", str(cfg_path), "--out", out,
                         "--seed", "9", "--quiet"]) == 0
        with open(os.path.join(out, "run.json")) as f:
            run = json.load(f)
        assert run["config"]["train"]["seed"] == 9
