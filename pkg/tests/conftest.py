import pytest

from wdtmd.config import build_config
from wdtmd.image import load_dataset
from wdtmd.synth import generate_corpus

# a corpus and model small enough to train for a few epochs in seconds
TINY = {
    "synth.image_size": [32, 32],
    "synth.n_images": 12,
    "synth.split": [8, 2, 2],
    "synth.noise_std": 0.002,
    "preprocess.resize": [32, 32],
    "preprocess.clahe_tiles": [4, 4],
    "denoiser.depth": 1,
    "denoiser.hidden_dim": 32,
    "denoiser.num_heads": 2,
    "denoiser.patch_size": 4,
    "denoiser.timestep_embed_dim": 16,
    "diffusion.sampling_steps": 4,
    "train.epochs": 2,
    "train.val_every": 1,
    "train.lr_init": 1e-3,
}


def tiny_config(root, **overrides):
    flat = dict(TINY)
    flat["data.root"] = str(root)
    flat.update({k.replace("__", "."): v for k, v in overrides.items()})
    return build_config("desk", overrides=flat)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = tiny_config(root)
    generate_corpus(cfg.synth, root)
    return root


@pytest.fixture
def tiny_samples(tiny_corpus):
    cfg = tiny_config(tiny_corpus)
    return load_dataset(tiny_corpus, cfg.data.manifest_path(), cfg.preprocess)


# criterion number -> (description, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        text, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {text}{': ' + detail if detail else ''}")
