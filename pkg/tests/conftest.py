import os
import sys

import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(int(os.environ.get("MOGIC_THREADS", "1")))


import pytest  # noqa: E402

from mogic.autoencoder import AEConfig, train_autoencoder  # noqa: E402
from mogic.cmt import CMTConfig  # noqa: E402
from mogic.config import RunConfig, TrainConfig  # noqa: E402
from mogic.heads import IPHConfig, MGHConfig  # noqa: E402
from mogic.model import build_items  # noqa: E402
from mogic.pipeline import build_model, load_splits  # noqa: E402
from mogic.synthdata import build_corpus  # noqa: E402


def tiny_config(**train_kw) -> RunConfig:
    return RunConfig(
        ae=AEConfig(latent_dim=8, channels=(32, 32), batch_size=16, warmup_steps=5),
        cmt=CMTConfig(layers=1, width=32, heads=4),
        mgh=MGHConfig(depth=2, width=64, time_dim=16),
        iph=IPHConfig(layers=1, width=32, heads=4),
        train=TrainConfig(batch_size=8, lr=1e-3, warmup_steps=5, diffusion_mult=1, **train_kw),
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    manifest = build_corpus(40, tmp_path_factory.mktemp("corpus"), seed=0, duration_range=(2.0, 3.0))
    return manifest, load_splits(manifest)


@pytest.fixture(scope="session")
def tiny_ae(tiny_corpus):
    _, splits = tiny_corpus
    return train_autoencoder(splits["train"].feats, tiny_config().ae, epochs=2, seed=0)


@pytest.fixture
def tiny_model(tiny_corpus, tiny_ae):
    """Fresh small generator plus its train/val latent items."""
    _, splits = tiny_corpus
    torch.manual_seed(0)
    model = build_model(tiny_config(), tiny_ae, splits["train"].feats)
    items = {s: build_items(model, splits[s].records, splits[s].feats) for s in ("train", "val")}
    return model, items


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(RESULTS):
        terminalreporter.write_line(line(c))
