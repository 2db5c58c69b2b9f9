"""Config parsing, stage orchestration, manifest reruns, CLI exit codes."""

import dataclasses
import json
import math

import pytest

from ldgan import cli, pipeline
from ldgan.checkpoints import read_history
from ldgan.config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from ldgan.errors import ConfigError, DependencyError


def tiny_dict(out, **extra):
    d = {
        "seed": 3,
        "out": str(out),
        "test_count": 2,
        "synth": {"m": 16, "n": 16, "l": 8, "count": 4},
        "ae": {"channels": 3, "epochs": 1, "batch": 2},
        "gan": {"epochs": 1, "batch": 2},
        "task": {"epochs": 1, "batch": 2},
        "analysis": {"samples": 4, "q": 3},
    }
    d.update(extra)
    return d


def tiny_cfg(out, **extra) -> RunConfig:
    return config_from_dict(tiny_dict(out, **extra))


def write_cfg(tmp_path, name="cfg.json", **extra):
    p = tmp_path / name
    p.write_text(json.dumps(tiny_dict(tmp_path / "run", **extra)))
    return p


# ---------------------------------------------------------------------------
# configuration document

class TestConfig:
    def test_empty_document_is_a_valid_run(self):
        cfg = config_from_dict({})
        cfg.validate()
        assert cfg.seed == 0
        assert cfg.operator.task == "csi"

    def test_defaults_give_400_train_and_40_test_cubes(self):
        cfg = config_from_dict({})
        assert cfg.synth.count == 400
        assert cfg.test_count == 40

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="synht"):
            config_from_dict({"synht": {}})

    def test_unknown_nested_key_names_the_dotted_path(self):
        with pytest.raises(ConfigError, match=r"ae\.channles"):
            config_from_dict({"ae": {"channles": 3}})

    def test_section_must_be_an_object(self):
        with pytest.raises(ConfigError, match="gan"):
            config_from_dict({"gan": 7})

    def test_wrong_value_types_rejected(self):
        with pytest.raises(ConfigError, match=r"ae\.epochs"):
            config_from_dict({"ae": {"epochs": "ten"}})
        with pytest.raises(ConfigError, match=r"gan\.lr"):
            config_from_dict({"gan": {"lr": True}})
        with pytest.raises(ConfigError, match="deterministic"):
            config_from_dict({"deterministic": 1})

    def test_run_seed_cascades_unless_stage_pins_its_own(self):
        cfg = config_from_dict({"seed": 7, "ae": {"seed": 1}})
        assert cfg.seed == 7
        assert cfg.ae.seed == 1
        assert cfg.gan.seed == 7
        assert cfg.synth.seed == 7
        assert cfg.task.seed == 7

    def test_null_snr_means_noiseless(self):
        cfg = config_from_dict({"task": {"snr_db": None}})
        assert math.isinf(cfg.task.snr_db)

    def test_dict_round_trip_is_identity(self):
        cfg = tiny_cfg("x", task={"epochs": 2, "batch": 2, "snr_db": None})
        again = config_from_dict(config_to_dict(cfg))
        assert again == cfg
        assert json.dumps(config_to_dict(cfg))  # strict JSON serializable

    def test_file_round_trip(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    def test_missing_and_invalid_files_are_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")
        (tmp_path / "broken.json").write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "broken.json")

    def test_semantic_validation_still_applies(self):
        with pytest.raises(ConfigError, match="q_true"):
            config_from_dict({"synth": {"q_true": 99}})
        with pytest.raises(ConfigError, match="channels"):
            config_from_dict({"ae": {"channels": 8}})  # not below l

    def test_overrides_map_onto_the_right_fields(self):
        cfg = config_from_dict({})
        out = apply_overrides(cfg, seed=9, channels=4, mu_ae=1e-3, mu_gan=1e-5,
                              fraction=0.5, target="full", task="sisr",
                              source="ld-gan", out="elsewhere",
                              deterministic=True)
        assert out.seed == 9 and out.ae.seed == 9 and out.task.seed == 9
        assert out.ae.channels == 4
        assert out.ae.mu_ae == 1e-3
        assert out.gan.mu_gan == 1e-5
        assert out.task.fraction == 0.5
        assert out.gan.target == "full"
        assert out.operator.task == "sisr"
        assert out.task.source == "ld-gan"
        assert out.out == "elsewhere"
        assert out.deterministic
        assert cfg.seed == 0  # original untouched

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError):
            apply_overrides(config_from_dict({}), fraction=2.0)


# ---------------------------------------------------------------------------
# stage orchestration and the manifest

class TestStages:
    def test_synth_writes_both_splits(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        result = pipeline.run_synth(cfg)
        assert result.ran
        manifest = json.loads((tmp_path / "run" / "data" / "manifest.json").read_text())
        assert manifest["train"]["count"] == 4
        assert manifest["test"]["count"] == 2

    def test_resolved_config_lands_in_the_run_directory(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        copied = load_config(tmp_path / "run" / "config.json")
        assert copied == cfg

    def test_rerun_with_same_inputs_is_a_noop(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        assert not pipeline.run_synth(cfg).ran

    def test_force_reruns_anyway(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        assert pipeline.run_synth(cfg, force=True).ran

    def test_config_change_invalidates_the_stage(self, tmp_path):
        pipeline.run_synth(tiny_cfg(tmp_path / "run"))
        changed = tiny_cfg(tmp_path / "run", synth={"m": 16, "n": 16, "l": 8, "count": 5})
        assert pipeline.run_synth(changed).ran

    def test_tampered_output_triggers_a_rerun(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        victim = tmp_path / "run" / "data" / "train" / "00000.scub"
        victim.write_bytes(victim.read_bytes()[:-4] + b"\0\0\0\0")
        assert pipeline.run_synth(cfg).ran

    def test_corrupt_manifest_just_means_rerun(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        (tmp_path / "run" / "manifest.json").write_text("{broken")
        assert pipeline.run_synth(cfg).ran

    def test_upstream_hash_change_invalidates_downstream(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        pipeline.run_train_ae(cfg)
        assert not pipeline.run_train_ae(cfg).ran
        pipeline.run_synth(tiny_cfg(tmp_path / "run", seed=4))
        assert pipeline.run_train_ae(tiny_cfg(tmp_path / "run", seed=4)).ran

    def test_missing_upstream_names_the_stage(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        with pytest.raises(DependencyError, match="synth"):
            pipeline.run_train_ae(cfg)
        with pytest.raises(DependencyError, match="train-gan"):
            pipeline.run_sample(cfg)

    def test_latent_gan_refuses_before_autoencoder(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run")
        pipeline.run_synth(cfg)
        with pytest.raises(DependencyError, match="train-ae"):
            pipeline.run_train_gan(cfg)

    def test_full_gan_needs_only_data(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run", gan={"epochs": 1, "batch": 2, "target": "full"})
        pipeline.run_synth(cfg)
        result = pipeline.run_train_gan(cfg)
        assert result.ran
        assert (tmp_path / "run" / "gan" / "full" / "gan.ckpt").exists()

    def test_train_task_with_pool_source_needs_samples(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run",
                       task={"epochs": 1, "batch": 2, "source": "ld-gan",
                             "fraction": 0.5})
        pipeline.run_synth(cfg)
        with pytest.raises(DependencyError, match="sample"):
            pipeline.run_train_task(cfg)


@pytest.fixture(scope="module")
def ld_run(tmp_path_factory):
    """One shared latent-mode run: synth through sample."""
    out = tmp_path_factory.mktemp("ld") / "run"
    cfg = tiny_cfg(out)
    pipeline.run_synth(cfg)
    pipeline.run_train_ae(cfg)
    pipeline.run_encode(cfg)
    pipeline.run_train_gan(cfg)
    pipeline.run_sample(cfg)
    return cfg, out


class TestTrainingStages:
    def test_histories_have_one_row_per_epoch(self, ld_run):
        cfg, out = ld_run
        assert len(read_history(out / "ae" / "history.csv")) == cfg.ae.epochs
        assert len(read_history(out / "gan" / "latent" / "history.csv")) == cfg.gan.epochs

    def test_pool_matches_train_split_size_by_default(self, ld_run):
        cfg, out = ld_run
        manifest = json.loads((out / "samples" / "ld-gan" / "manifest.json").read_text())
        assert manifest["pool"]["count"] == cfg.synth.count

    def test_augmented_task_training_writes_report(self, ld_run):
        cfg, out = ld_run
        tcfg = dataclasses.replace(cfg, task=dataclasses.replace(
            cfg.task, source="ld-gan", fraction=1.0))
        pipeline.run_train_task(tcfg)
        report = read_history(out / "task" / "csi" / "report.csv")
        assert len(report) == 1
        assert report[0]["task"] == "csi"
        assert report[0]["source"] == "ld-gan"
        assert float(report[0]["best_psnr"]) > 0
        assert int(report[0]["epoch_of_best"]) == 0

    def test_evaluate_emits_one_row_per_test_cube(self, ld_run):
        cfg, out = ld_run
        tcfg = dataclasses.replace(cfg, task=dataclasses.replace(
            cfg.task, source="ld-gan", fraction=1.0))
        pipeline.run_train_task(tcfg)
        pipeline.run_evaluate(tcfg)
        rows = read_history(out / "evaluate" / "csi" / "metrics.csv")
        assert len(rows) == cfg.test_count
        assert all(float(r["psnr"]) > 0 and 0 <= float(r["ssim"]) <= 1 for r in rows)

    def test_analyze_covers_original_and_existing_pools(self, ld_run):
        cfg, out = ld_run
        pipeline.run_analyze(cfg)
        rows = read_history(out / "analyze" / "endmembers.csv")
        assert {r["source"] for r in rows} == {"original", "ld-gan"}
        assert len(rows) == 2 * cfg.analysis.q * cfg.synth.l
        pca = read_history(out / "analyze" / "pca.csv")
        assert set(pca[0]) == {"source", "index", "pc1", "pc2", "pc3"}

    def test_sisr_task_uses_its_own_artifact_slot(self, ld_run):
        cfg, out = ld_run
        scfg = dataclasses.replace(cfg, operator=dataclasses.replace(
            cfg.operator, task="sisr"))
        pipeline.run_train_task(scfg)
        assert (out / "task" / "sisr" / "task.ckpt").exists()
        report = read_history(out / "task" / "sisr" / "report.csv")
        assert report[0]["task"] == "sisr"


class TestResume:
    def test_raising_the_epoch_count_resumes_from_the_checkpoint(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run", ae={"channels": 3, "epochs": 2, "batch": 2})
        pipeline.run_synth(cfg)
        pipeline.run_train_ae(cfg)
        before = read_history(tmp_path / "run" / "ae" / "history.csv")
        assert [r["epoch"] for r in before] == ["0", "1"]

        grown = tiny_cfg(tmp_path / "run", ae={"channels": 3, "epochs": 4, "batch": 2})
        assert pipeline.run_train_ae(grown).ran
        after = read_history(tmp_path / "run" / "ae" / "history.csv")
        assert [r["epoch"] for r in after] == ["0", "1", "2", "3"]
        assert after[:2] == before  # earlier epochs kept verbatim

    def test_lowering_the_epoch_count_retrains_from_scratch(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run", ae={"channels": 3, "epochs": 3, "batch": 2})
        pipeline.run_synth(cfg)
        pipeline.run_train_ae(cfg)
        shrunk = tiny_cfg(tmp_path / "run", ae={"channels": 3, "epochs": 2, "batch": 2})
        assert pipeline.run_train_ae(shrunk).ran
        assert len(read_history(tmp_path / "run" / "ae" / "history.csv")) == 2

    def test_interrupted_training_resumes_from_partial_history(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "run", ae={"channels": 3, "epochs": 3, "batch": 2})
        pipeline.run_synth(cfg)
        pipeline.run_train_ae(cfg)
        run = tmp_path / "run"
        # Forge an interruption: drop the final epoch from the history and
        # mark the stage as still running, as a mid-epoch kill would leave it.
        rows = read_history(run / "ae" / "history.csv")
        from ldgan.autoencoder import AE_HISTORY_FIELDS
        from ldgan.checkpoints import write_history
        write_history(run / "ae" / "history.csv", rows[:2], AE_HISTORY_FIELDS)
        manifest = json.loads((run / "manifest.json").read_text())
        entry = manifest["stages"]["train-ae"]
        manifest["stages"]["train-ae"] = {
            "resume_key": entry["resume_key"], "status": "running", "seconds": 1.0}
        (run / "manifest.json").write_text(json.dumps(manifest))

        assert pipeline.run_train_ae(cfg).ran
        after = read_history(run / "ae" / "history.csv")
        assert [r["epoch"] for r in after] == ["0", "1", "2"]


class TestDeterminism:
    def test_same_config_same_seed_gives_identical_artifacts(self, tmp_path):
        hashes = []
        for name in ("a", "b"):
            cfg = tiny_cfg(tmp_path / name)
            pipeline.run_synth(cfg)
            pipeline.run_train_ae(cfg)
            pipeline.run_encode(cfg)
            hashes.append({rel: pipeline.hash_path(tmp_path / name / rel)
                           for rel in ("data", "ae/ae.ckpt", "ae/history.csv", "latents")})
        assert hashes[0] == hashes[1]

    def test_different_seed_changes_the_data(self, tmp_path):
        a = tiny_cfg(tmp_path / "a")
        b = tiny_cfg(tmp_path / "b", seed=4)
        pipeline.run_synth(a)
        pipeline.run_synth(b)
        assert (pipeline.hash_path(tmp_path / "a" / "data")
                != pipeline.hash_path(tmp_path / "b" / "data"))


# ---------------------------------------------------------------------------
# experiment suites

@pytest.fixture(scope="module")
def suite_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite") / "run"
    return tiny_cfg(out), out


class TestSuites:
    def test_da_sweep_grid(self, suite_run):
        cfg, out = suite_run
        pipeline.run_experiment(cfg, "da-sweep")
        rows = read_history(out / "experiments" / "da-sweep.csv")
        assert len(rows) == 3 * 7  # per task: baseline + 2 sources x 3 fractions
        fractions = {r["fraction"] for r in rows if r["source"] == "ld-gan"}
        assert fractions == {"0.2", "0.5", "1"}
        assert {r["task"] for r in rows} == {"csi", "rgb", "sisr"}

    def test_geo_compare_emits_the_six_row_grid_per_task(self, suite_run):
        cfg, out = suite_run
        pipeline.run_experiment(cfg, "geo-compare")
        rows = read_history(out / "experiments" / "geo-compare.csv")
        assert len(rows) == 18
        csi = [(r["method"], r["geometric"]) for r in rows if r["task"] == "csi"]
        assert len(csi) == 6
        assert set(csi) == {(m, g) for m in ("baseline", "s-gan", "ld-gan")
                            for g in ("False", "True")}

    def test_reg_sweep_covers_the_shared_grid(self, suite_run):
        cfg, out = suite_run
        pipeline.run_experiment(cfg, "reg-sweep")
        rows = read_history(out / "experiments" / "reg-sweep.csv")
        assert {r["mu"] for r in rows} == {"0", "1e-05", "0.001"}
        assert len(rows) == 9

    def test_convergence_reports_both_generator_flavours(self, suite_run):
        cfg, out = suite_run
        pipeline.run_experiment(cfg, "convergence")
        rows = read_history(out / "experiments" / "convergence.csv")
        assert {r["target"] for r in rows} == {"latent", "full"}
        by_target = {r["target"]: r["channels"] for r in rows}
        assert by_target == {"latent": "3", "full": "8"}
        for r in rows:
            gap = abs(float(r["value_v"]) + 2.0 * math.log(2.0))
            assert math.isclose(float(r["gap"]), gap, rel_tol=1e-9)

    def test_endmember_and_pca_suites_cover_three_sources(self, suite_run):
        cfg, out = suite_run
        pipeline.run_experiment(cfg, "endmembers")
        pipeline.run_experiment(cfg, "pca")
        em = read_history(out / "experiments" / "endmembers.csv")
        assert {r["source"] for r in em} == {"original", "ld-gan", "s-gan"}
        pca = read_history(out / "experiments" / "pca.csv")
        assert {r["source"] for r in pca} == {"original", "ld-gan", "s-gan"}

    def test_suite_rerun_is_a_noop(self, suite_run):
        cfg, _ = suite_run
        assert not pipeline.run_experiment(cfg, "pca").ran

    def test_unknown_suite_rejected(self, suite_run):
        cfg, _ = suite_run
        with pytest.raises(ConfigError, match="frobnicate"):
            pipeline.run_experiment(cfg, "frobnicate")


# ---------------------------------------------------------------------------
# the executable front end

class TestCli:
    def test_stage_commands_run_and_exit_zero(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        for cmd in ("synth", "train-ae", "encode", "train-gan", "sample"):
            assert cli.main([cmd, "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "synth: done" in out
        assert "sample:ld-gan: done" in out

    def test_rerun_reports_up_to_date(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        cli.main(["synth", "--config", str(cfg_path)])
        cli.main(["synth", "--config", str(cfg_path)])
        assert "up to date" in capsys.readouterr().out

    def test_config_problems_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"synth": {"q_true": 99}}')
        assert cli.main(["synth", "--config", str(bad)]) == 2
        assert "q_true" in capsys.readouterr().err
        assert cli.main(["synth", "--config", str(tmp_path / "missing.json")]) == 2
        assert cli.main(["train-task", "--config", str(write_cfg(tmp_path)),
                         "--fraction", "7"]) == 2

    def test_missing_upstream_exits_3(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        assert cli.main(["encode", "--config", str(cfg_path)]) == 3
        assert "synth" in capsys.readouterr().err

    def test_unknown_subcommand_and_suite_are_usage_errors(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            cli.main(["experiment", "frobnicate"])
        assert exc.value.code == 2

    def test_flag_overrides_reach_the_run(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        other = tmp_path / "elsewhere"
        assert cli.main(["synth", "--config", str(cfg_path),
                         "--out", str(other), "--seed", "11"]) == 0
        copied = load_config(other / "config.json")
        assert copied.seed == 11
        assert copied.synth.seed == 11

    def test_bad_thread_cap_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LDGAN_THREADS", "many")
        assert cli.main(["synth", "--config", str(write_cfg(tmp_path))]) == 2

    def test_thread_cap_applies(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LDGAN_THREADS", "1")
        assert cli.main(["synth", "--config", str(write_cfg(tmp_path))]) == 0

    def test_deterministic_cli_reruns_bit_identically(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            for cmd in ("synth", "train-ae"):
                assert cli.main([cmd, "--config", str(cfg_path),
                                 "--out", str(out), "--deterministic"]) == 0
            digests.append({rel: pipeline.hash_path(out / rel)
                            for rel in ("data", "ae/ae.ckpt", "ae/history.csv")})
        assert digests[0] == digests[1]
