import numpy as np
import pytest
import torch

from segcpc.corpus import LabeledInterval, Utterance, load_manifest
from segcpc.model import ModelConfig, SegmentalCPC
from segcpc.synthetic import SyntheticSpec, generate_corpus
from segcpc.training import TrainConfig, train


def make_utterance(
    utt_id: str = "u0",
    n_samples: int = 4800,
    seed: int = 0,
    phones: list[tuple[float, float, str]] | None = None,
    words: list[tuple[float, float, str]] | None = None,
) -> Utterance:
    rng = np.random.default_rng(seed)
    samples = rng.uniform(-0.5, 0.5, n_samples).astype(np.float32)
    to_iv = lambda triples: [LabeledInterval(a, b, lab) for a, b, lab in triples]
    return Utterance(
        id=utt_id,
        samples=samples,
        phone_alignment=to_iv(phones) if phones else None,
        word_alignment=to_iv(words) if words else None,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small rendered corpus on disk with train/val/test manifests."""
    root = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(n_train=6, n_val=3, n_test=3, seed=7, max_phones=7)
    manifests = generate_corpus(root, spec)
    return {split: load_manifest(path, split=split) for split, path in manifests.items()}


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus_cli")
    spec = SyntheticSpec(n_train=6, n_val=3, n_test=3, seed=11, max_phones=7)
    generate_corpus(root, spec)
    return root


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tmp_path_factory):
    """One short training run shared by tests that need a real checkpoint."""
    out = tmp_path_factory.mktemp("run")
    config = TrainConfig(epochs=2, channels=16, nsc_start_epoch=1, seed=3)
    result = train(
        config,
        tiny_corpus["train"],
        tiny_corpus["val"],
        out,
        log=lambda _: None,
    )
    return {"config": config, "result": result, "out": out}


@pytest.fixture()
def small_model() -> SegmentalCPC:
    torch.manual_seed(0)
    return SegmentalCPC(ModelConfig(channels=16))
