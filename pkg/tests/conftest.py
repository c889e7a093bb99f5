import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def runs():
    """Default, fusion-off and mamba-off training on the 200-image desk-scale set (seed 0)."""
    from famseg.data import PhantomSpec, generate, split, stack
    from famseg.metrics import iou
    from famseg.model import FAMSeg
    from famseg.train import TrainConfig, class_prior_bias, evaluate, train

    data = generate(PhantomSpec(), 200, 0)
    tr, va, te = split(data, (0.8, 0.1, 0.1), 0)
    cfg = TrainConfig(seed=0)
    out = {"cfg": cfg, "train": tr, "val": va, "test": te}
    t0 = time.time()
    out["default"] = train(cfg, tr, va)
    out["default_seconds"] = time.time() - t0
    untrained = FAMSeg(cfg.model, seed=cfg.seed)
    untrained.decoder.classifier.bias.data[:] = class_prior_bias(stack(tr)[1], cfg.num_classes)
    out["untrained_model"] = untrained
    out["untrained"] = iou(evaluate(untrained, va))[1]
    out["no_fusion"] = train(cfg.with_ablation(fusion=False), tr, va)
    out["no_mamba"] = train(cfg.with_ablation(mamba=False), tr, va)
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
