import json
from pathlib import Path

import numpy as np
import pytest
import torch

from ptreid import cli
from ptreid.datasets import load_image_dir, make_split
from ptreid.toydata import ToySpec, synth_toy_dataset

torch.set_num_threads(1)

REPO_ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = REPO_ROOT / "configs" / "toy.yaml"


@pytest.fixture(scope="session")
def toy_samples():
    samples, poses = synth_toy_dataset(ToySpec(num_identities=6, images_per_identity=4))
    return samples, poses


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """Run the full committed toy pipeline once; shared by the heavier tests."""
    import time

    out = tmp_path_factory.mktemp("toy_run")
    started = time.monotonic()
    for command in ("synth", "cluster", "train-gan", "train-fusion", "index", "eval"):
        code = cli.main([command, "--config", str(TOY_CONFIG), "--output-dir", str(out)])
        assert code == 0, f"{command} failed with exit code {code}"
    elapsed = time.monotonic() - started
    return {"out": out, "elapsed": elapsed}


@pytest.fixture(scope="session")
def toy_pipeline(trained_toy):
    from ptreid.config import load_config

    out = trained_toy["out"]
    cfg = load_config(TOY_CONFIG, [f"output_dir={out}"])
    paths = cli._paths(cfg)
    pipeline = cli._load_pipeline(cfg, paths)
    samples = load_image_dir(out / "dataset", naming="flat", pose_dir=out / "dataset" / "poses")
    split = make_split(samples, "toy", seed=cfg.seed)
    return {"cfg": cfg, "paths": paths, "pipeline": pipeline, "split": split}


def load_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def hash_tree(root: Path, exclude: tuple[str, ...] = ("manifests",)) -> dict[str, str]:
    """Relative path -> content hash for every file under root."""
    import hashlib

    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_dir():
            continue
        rel = path.relative_to(root)
        if any(part in exclude for part in rel.parts):
            continue
        out[str(rel)] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(1729)
