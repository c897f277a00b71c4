import numpy as np
import pytest

from linlab import data as D
from linlab import model as M
from linlab import trainer as T
from linlab.schedule import ScheduleConfig

MICRO = M.ModelConfig(widths=(2, 4), latent_channels=1, emb_dim=4, emb_hidden=4,
                      window=32, fft_size=16, hop=4)


def micro_train_config(steps=30, seed=0):
    sched = ScheduleConfig(total_steps=steps, warmup_steps=5, lr_max=1e-2, ema_decay=0.9)
    return T.TrainConfig(schedule=sched, model=MICRO, batch_size=3, seed=seed)


@pytest.fixture(scope="session")
def micro_checkpoint(tmp_path_factory):
    """A briefly trained micro CAE checkpoint (32-sample windows)."""
    rng = np.random.default_rng(0)
    t = np.arange(64) / 8000
    clips = np.stack([0.4 * np.sin(2 * np.pi * rng.uniform(300, 2000) * t) for _ in range(6)])
    return T.train(micro_train_config(), clips, tmp_path_factory.mktemp("micro"), "lin")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Four 0.25 s two-source tracks on disk."""
    root = tmp_path_factory.mktemp("corpus")
    D.make_corpus(D.generate_manifest(4, 2, seed=5, seconds=0.25), root)
    return root


# ------------------------------------------------------------ acceptance lines

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
