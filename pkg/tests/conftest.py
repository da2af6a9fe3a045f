import dataclasses
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hdprior.config import PipelineConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(seed=0, n_images=6):
    """A corpus and training budget small enough for a few seconds per command."""
    cfg = PipelineConfig().with_seed(seed)
    return dataclasses.replace(
        cfg,
        synth=dataclasses.replace(cfg.synth, n_images=n_images),
        extractor=dataclasses.replace(cfg.extractor, c0=4, c1=8, pretrain_iters=20,
                                      pretrain_batch=4),
        train=dataclasses.replace(cfg.train, stage1_iters=20, stage2_iters=20),
        analysis=dataclasses.replace(cfg.analysis, perplexity=3.0, tsne_iters=60,
                                     permutations=20),
        sweep=dataclasses.replace(cfg.sweep, thresholds=(0.0, 0.5, 1.0)),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)
