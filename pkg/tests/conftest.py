"""Shared toy-world fixtures. Everything heavy is session scoped and lazy:
tests that only need mechanics use the untrained runtime, while the
trained fixtures run one real training each for the whole suite."""
from __future__ import annotations

import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from anoclick.bank import build_reference_bank, save_bank
from anoclick.config import tiny_model_config, toy_train_config
from anoclick.datasets import load_dataset
from anoclick.extractors import ToyConvExtractor
from anoclick.model import AnomalyMaskNet
from anoclick.prompts import PromptCorpus, save_prompt_corpus
from anoclick.runtime import load_runtime
from anoclick.synthetic import generate_toy_dataset, toy_prompt_corpus
from anoclick.training import (
    prepare_synthetic_samples,
    prepare_training_samples,
    save_checkpoint,
    train_model,
)

torch.set_num_threads(2)

CATEGORIES = ("weave", "grid")


@pytest.fixture(scope="session")
def toy_paths(tmp_path_factory):
    base = tmp_path_factory.mktemp("toy_world")
    train_root = base / "data_train"
    eval_root = base / "data_eval"
    generate_toy_dataset(train_root, CATEGORIES, size=64, n_train_good=6,
                         n_test_good=2, n_test_defect=6, seed=0)
    generate_toy_dataset(eval_root, CATEGORIES, size=64, n_train_good=1,
                         n_test_good=2, n_test_defect=3, seed=100)
    corpus = PromptCorpus({
        (obj, defect): phrases
        for obj, defects in toy_prompt_corpus(CATEGORIES).items()
        for defect, phrases in defects.items()
    })
    corpus_path = base / "corpus.json"
    save_prompt_corpus(corpus, corpus_path)
    return SimpleNamespace(base=base, train_root=train_root, eval_root=eval_root,
                           corpus_path=corpus_path, corpus=corpus)


@pytest.fixture(scope="session")
def toy_extractor():
    return ToyConvExtractor(image_size=64, stride=8, dim=64, seed=0)


@pytest.fixture(scope="session")
def toy_model_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def toy_banks(toy_paths, toy_extractor):
    banks_dir = toy_paths.base / "banks"
    banks_dir.mkdir(exist_ok=True)
    banks = {}
    for category in CATEGORIES:
        index = load_dataset(toy_paths.train_root, "mvtec", category=category,
                             split="train")
        bank = build_reference_bank(index, toy_extractor)
        save_bank(bank, banks_dir / f"{category}.bank")
        banks[category] = bank
    return SimpleNamespace(banks=banks, dir=banks_dir)


def _runtime_cfg(toy_paths, toy_banks, checkpoint):
    return {
        "checkpoint": str(checkpoint),
        "banks_dir": str(toy_banks.dir),
        "corpus": str(toy_paths.corpus_path),
        "extractor": {"kind": "toy-conv", "stride": 8, "seed": 0},
        "text_encoder": {"kind": "hash", "seed": 0},
        "seed": 0,
    }


@pytest.fixture(scope="session")
def untrained_runtime(toy_paths, toy_banks, toy_model_config):
    """Fresh weights; enough for mechanics (determinism, undo, export)."""
    torch.manual_seed(0)
    model = AnomalyMaskNet(toy_model_config)
    path = toy_paths.base / "untrained.pt"
    save_checkpoint(path, model, step=0)
    return load_runtime(_runtime_cfg(toy_paths, toy_banks, path))


@pytest.fixture(scope="session")
def trained_click(toy_paths, toy_banks, toy_extractor, toy_model_config):
    """One real training run of the click model, shared by the suite."""
    from anoclick.runtime import make_text_encoder

    start = time.monotonic()
    samples = []
    for category in CATEGORIES:
        index = load_dataset(toy_paths.train_root, "mvtec", category=category,
                             split="test")
        samples += prepare_training_samples(index, toy_banks.banks[category],
                                            toy_extractor, toy_model_config)
    text_encoder = make_text_encoder({"kind": "hash", "seed": 0},
                                     toy_model_config.text_dim)
    result = train_model(
        samples, toy_paths.corpus, toy_model_config,
        toy_train_config(steps=250),
        toy_paths.base / "train_click", text_encoder=text_encoder,
    )
    elapsed = time.monotonic() - start
    runtime = load_runtime(_runtime_cfg(toy_paths, toy_banks, result.checkpoint_path))
    return SimpleNamespace(result=result, runtime=runtime, train_seconds=elapsed,
                           checkpoint=result.checkpoint_path)


@pytest.fixture(scope="session")
def trained_seg(toy_paths, toy_banks, toy_extractor):
    """Multi-class automatic-mode training on synthetic anomalies."""
    from anoclick.runtime import make_text_encoder

    seg_config = tiny_model_config(mode="seg")
    rng = np.random.default_rng(1)
    samples = []
    for category in CATEGORIES:
        index = load_dataset(toy_paths.train_root, "mvtec", category=category,
                             split="train")
        samples += prepare_synthetic_samples(index, toy_banks.banks[category],
                                             toy_extractor, seg_config, rng,
                                             per_image=2)
    text_encoder = make_text_encoder({"kind": "hash", "seed": 0},
                                     seg_config.text_dim)
    result = train_model(
        samples, toy_paths.corpus, seg_config,
        toy_train_config(steps=150),
        toy_paths.base / "train_seg", text_encoder=text_encoder,
    )
    runtime = load_runtime(_runtime_cfg(toy_paths, toy_banks, result.checkpoint_path))
    return SimpleNamespace(result=result, runtime=runtime,
                           checkpoint=result.checkpoint_path)
