import numpy as np
import pytest

from dual_lora.synthdata import CorpusSpec, build_bundle
from dual_lora.training import CurriculumSchedule, TrainConfig
from dual_lora.network import ModelConfig

SMALL_SPEC = CorpusSpec(n_speakers=12, n_languages=3, utts_per_speaker=8, frames_per_utt=5, feat_dim=10,
                        speaker_dim=4, language_dim=2, seed=11)
SMALL_MODEL = ModelConfig(feat_dim=10, width=12, depth=2, d_emb=6, d_emb_lang=4, r_spk=4, r_lang=2,
                          disc_proj=5, disc_hidden=8, n_languages=3)


def small_train_config(seed: int = 0, epochs_per_phase: int = 1, **kw) -> TrainConfig:
    base = dict(model=SMALL_MODEL, schedule=CurriculumSchedule.scaled(epochs_per_phase), warmup_epochs=2,
                batch_size=16, seed=seed)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_bundle():
    return build_bundle(SMALL_SPEC, trials_per_scenario=60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
