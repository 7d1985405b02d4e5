import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).parent))

# (criterion, passed, detail) rows appended by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@dataclass
class Trained:
    cfg: object
    models: object
    train: object
    val: object
    seconds: float
    cached: bool


@pytest.fixture(scope="session")
def trained():
    """Full pipeline trained once with the default config.

    Set TDSR_ACCEPTANCE_CACHE to a directory to reuse weights (and the
    recorded training time) across sessions.
    """
    from tdsr import pipeline as pl
    from tdsr.checkpoint import load_checkpoint, save_checkpoint
    from tdsr.cli import synth_pairs
    from tdsr.config import RunConfig

    cfg = RunConfig()
    train, val = synth_pairs(cfg, "train"), synth_pairs(cfg, "val")
    models = pl.Models.fresh(0, cfg.model, schedule=cfg.schedule)
    cache = os.environ.get("TDSR_ACCEPTANCE_CACHE")
    ckpt = Path(cache) / "models.tdsr" if cache else None
    if ckpt is not None and ckpt.exists():
        models.load_state(load_checkpoint(ckpt))
        seconds = json.loads((ckpt.parent / "meta.json").read_text())["seconds"]
        return Trained(cfg, models, train, val, seconds, True)
    start = time.perf_counter()
    pl.train_all(models, train, cfg)
    seconds = time.perf_counter() - start
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(models.state(), ckpt)
        (ckpt.parent / "meta.json").write_text(json.dumps({"seconds": seconds}))
    return Trained(cfg, models, train, val, seconds, False)
