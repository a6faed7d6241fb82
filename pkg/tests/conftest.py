import dataclasses

import pytest

from paretorl import pipeline
from paretorl.config import RunConfig

TINY = dict(n_prompts=4, codebook_size=12, min_len=4, task_max_len=8, max_len=10, data_size=64,
            n_pref_pairs=300, d_model=16, n_heads=2, n_layers=1, enc_dim=8, enc_hidden=8, enc_steps=60,
            d_g=16, scorer_hidden=8, scorer_steps=150, pretrain_steps=60, pretrain_batch=32,
            warmup_rollouts=96, n_per_group=4, minibatch=6, lr=1e-3, iterations=4, eval_samples=4)


def tiny_config(**overrides) -> RunConfig:
    return dataclasses.replace(RunConfig(**TINY), **overrides).validate()


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_art(tiny_cfg):
    return pipeline.build(tiny_cfg)


# one line per acceptance criterion, repeated at the end of the pytest run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
