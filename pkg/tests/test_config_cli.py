import json

import pytest
import yaml

from ptreid import cli
from ptreid.config import OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig, load_config
from conftest import TOY_CONFIG, load_json


class TestDefaults:
    def test_training_recipe_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.gan.train.adam_beta1 == 0.5
        assert cfg.gan.train.adam_beta2 == 0.999
        assert cfg.fusion.train.dropout == 0.6
        assert cfg.gan.image_size == (128, 64)
        assert cfg.augment.rotation_deg == 20.0
        assert cfg.cluster.clusters_per_joint == 3
        # final model selection: 12 poses from a full-body Gaussian mixture
        assert cfg.cluster.method == "gmm"
        assert cfg.cluster.mode == "fullbody"
        assert cfg.cluster.num_poses == 12
        assert cfg.gan.descriptor_dim == 2048

    def test_num_generated_follows_cluster(self):
        cfg = load_config(None, ["cluster.num_poses=7"])
        assert cfg.num_generated == 7
        cfg = load_config(None, ["fusion.num_generated=5"])
        assert cfg.num_generated == 5


class TestLayering:
    def test_file_overrides_defaults(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text(yaml.safe_dump({"seed": 9, "cluster": {"method": "kmeans"}}))
        cfg = load_config(f)
        assert cfg.seed == 9
        assert cfg.cluster.method == "kmeans"
        assert cfg.cluster.num_poses == 12  # untouched default

    def test_cli_overrides_file(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text(yaml.safe_dump({"cluster": {"num_poses": 8}}))
        cfg = load_config(f, ["cluster.num_poses=24", "gan.train.epochs=3"])
        assert cfg.cluster.num_poses == 24
        assert cfg.gan.train.epochs == 3

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text(yaml.safe_dump({"clusterz": {}}))
        with pytest.raises(ConfigError):
            load_config(f)
        with pytest.raises(ConfigError):
            load_config(None, ["cluster.bogus=1"])

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["cluster.method=ward"])
        with pytest.raises(ConfigError):
            load_config(None, ["gan.train.adam_beta1=2.0"])

    def test_committed_toy_config_parses(self):
        cfg = load_config(TOY_CONFIG)
        assert cfg.dataset.toy.num_identities == 10
        assert cfg.gan.descriptor_dim == 64
        assert cfg.cluster.num_poses == 4

    def test_output_root_env(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "/data/experiments")
        cfg = load_config(None, ["output_dir=run7"])
        assert str(cfg.resolved_output_dir()) == "/data/experiments/run7"
        monkeypatch.delenv(OUTPUT_ROOT_ENV)
        assert str(cfg.resolved_output_dir()) == "run7"


class TestCliErrors:
    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("cluster: {method: ward}\n")
        assert cli.main(["synth", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_missing_config_file_is_config_error(self, tmp_path):
        assert cli.main(["synth", "--config", str(tmp_path / "none.yaml")]) == cli.EXIT_CONFIG

    def test_missing_prerequisite_exit_code(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["synth", "--config", str(TOY_CONFIG), "--output-dir", str(out)]) == 0
        code = cli.main(["eval", "--config", str(TOY_CONFIG), "--output-dir", str(out)])
        assert code == cli.EXIT_MISSING
        assert "run train-fusion first" in capsys.readouterr().err
        code = cli.main(["cluster", "--config", str(TOY_CONFIG), "--output-dir", str(tmp_path / "empty")])
        assert code == cli.EXIT_MISSING

    def test_pretrained_variant_without_manifest_is_config_error(self, tmp_path):
        out = tmp_path / "run"
        base = ["--config", str(TOY_CONFIG), "--output-dir", str(out),
                "--set", "dataset.toy.num_identities=4", "--set", "dataset.toy.images_per_identity=2"]
        assert cli.main(["synth", *base]) == 0
        code = cli.main(["train-gan", *base,
                         "--set", "gan.backbone_variant=generic", "--set", "gan.descriptor_dim=2048"])
        assert code == cli.EXIT_CONFIG

    def test_eval_without_fusion_names_producer(self, tmp_path, trained_toy, capsys):
        # a run dir with everything except the fusion checkpoint
        partial = tmp_path / "partial"
        partial.mkdir()
        src = trained_toy["out"]
        import shutil

        shutil.copytree(src / "dataset", partial / "dataset")
        for name in ("pose_set.json", "gan.ckpt", "backbone_f1.ckpt", "backbone_f2.ckpt"):
            shutil.copy(src / name, partial / name)
        code = cli.main(["eval", "--config", str(TOY_CONFIG), "--output-dir", str(partial)])
        assert code == cli.EXIT_MISSING
        assert "run train-fusion first" in capsys.readouterr().err


class TestCliStages:
    def test_synth_writes_manifest_and_dataset(self, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["synth", "--config", str(TOY_CONFIG), "--output-dir", str(out),
                         "--set", "dataset.toy.num_identities=4", "--set", "dataset.toy.images_per_identity=2"]) == 0
        assert (out / "dataset" / "manifest.csv").exists()
        manifest = load_json(out / "manifests" / "synth.json")
        assert manifest["command"] == "synth"
        assert "manifest.csv" in manifest["outputs"]

    def test_cluster_after_synth(self, tmp_path):
        out = tmp_path / "run"
        base = ["--config", str(TOY_CONFIG), "--output-dir", str(out),
                "--set", "dataset.toy.num_identities=6", "--set", "dataset.toy.images_per_identity=4",
                "--set", "cluster.num_poses=3"]
        assert cli.main(["synth", *base]) == 0
        assert cli.main(["cluster", *base]) == 0
        doc = load_json(out / "pose_set.json")
        assert len(doc["poses"]) == 3
        assert doc["provenance"]["method"] == "gmm"

    def test_cluster_shorthand_flags(self, tmp_path):
        out = tmp_path / "run"
        base = ["--config", str(TOY_CONFIG), "--output-dir", str(out),
                "--set", "dataset.toy.num_identities=6", "--set", "dataset.toy.images_per_identity=4"]
        assert cli.main(["synth", *base]) == 0
        assert cli.main(["cluster", *base, "--method", "kmeans", "--mode", "bodyjoint",
                         "--num-poses", "5", "--seed", "99"]) == 0
        doc = load_json(out / "pose_set.json")
        assert len(doc["poses"]) == 5
        assert doc["provenance"]["method"] == "kmeans"
        assert doc["provenance"]["mode"] == "bodyjoint"
        assert doc["provenance"]["seed"] == 99


class TestTrainedArtifacts:
    def test_all_artifacts_present(self, trained_toy):
        out = trained_toy["out"]
        for name in ("pose_set.json", "backbone_f1.ckpt", "gan.ckpt", "gan_history.json",
                     "backbone_f2.ckpt", "fusion.ckpt", "fusion_history.json",
                     "descriptors_gallery.bin", "descriptors_query.bin",
                     "report.json", "report.txt", "cmc.png", "distances.png"):
            assert (out / name).exists(), name

    def test_report_schema(self, trained_toy):
        report = load_json(trained_toy["out"] / "report.json")
        for field in ("cmc", "rank1", "rank5", "rank10", "map", "per_query_ap", "intra_mean", "inter_mean"):
            assert field in report, field

    def test_generate_grid(self, trained_toy):
        out = trained_toy["out"]
        assert cli.main(["generate", "--config", str(TOY_CONFIG), "--output-dir", str(out)]) == 0
        assert (out / "generated_grid.png").exists()

    def test_descriptor_matrix_consistent_with_report(self, trained_toy):
        from ptreid.retrieval import load_descriptor_matrix

        desc, sidecar = load_descriptor_matrix(trained_toy["out"] / "descriptors_gallery.bin")
        report = load_json(trained_toy["out"] / "report.json")
        assert desc.shape[0] == report["num_gallery"] == len(sidecar["identities"])
