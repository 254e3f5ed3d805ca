import numpy as np
import pytest

from flagdit.codec import PATCH
from flagdit.data import MixtureDataset, PatternDataset
from flagdit.model import FlagDiT
from flagdit.train import (
    LOG_FIELDS,
    Adam,
    NumericalError,
    Stage,
    TrainConfig,
    make_training_batch,
    train_loop,
    train_step,
    weight_hash,
    write_loss_csv,
)
from conftest import tiny_config


def _gauss_model():
    return FlagDiT(tiny_config(patch_size=1, channels=2, train_height=1, train_width=1))


def test_first_step_loss_is_target_energy():
    m = _gauss_model()
    ds = MixtureDataset(200, seed=0)
    tcfg = TrainConfig(batch_size=16, seed=0)
    g, lab = ds.sample(np.random.default_rng(0), 16)
    batch, x, eps, t, _ = make_training_batch(g, lab, tcfg, np.random.default_rng(1), 1)
    res = train_step(m, Adam(m.parameters(), 1e-4), g, lab, tcfg, np.random.default_rng(1))
    target = (x - eps)[batch.patch_mask]
    assert res.loss == pytest.approx(float(np.mean(target.astype(np.float64) ** 2)), rel=1e-6)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = FlagDiT(tiny_config())
        res = train_loop(m, PatternDataset(8, 20, seed=0), TrainConfig(steps=6, batch_size=4,
                                                                       log_every=2, lr=1e-3))
        runs.append((res.losses, weight_hash(m)))
    assert runs[0] == runs[1]


def test_zero_steps_leaves_model_unchanged():
    m = FlagDiT(tiny_config())
    before = weight_hash(m)
    res = train_loop(m, PatternDataset(8, 5), TrainConfig(steps=0))
    assert weight_hash(m) == before and res.log == []


def test_log_length_and_csv(tmp_path):
    m = FlagDiT(tiny_config())
    res = train_loop(m, PatternDataset(8, 10), TrainConfig(steps=9, batch_size=2, log_every=3))
    assert len(res.log) == 3
    write_loss_csv(tmp_path / "l.csv", res.log)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 4


def test_two_stage_continuity():
    m = FlagDiT(tiny_config())
    events = []
    stages = [Stage(PatternDataset(8, 10, seed=1), 3), Stage(PatternDataset(16, 10, seed=2), 3)]
    hashes = []

    def cb(rec):
        events.append(rec)
        if rec.get("event") == "stage_start" and rec["stage"] == 1:
            hashes.append(weight_hash(m))

    train_loop(m, None, TrainConfig(steps=0, batch_size=2, log_every=1), callbacks=[cb],
               stages=stages)
    starts = [e for e in events if e.get("event") == "stage_start"]
    assert [s["geometry"][0] for s in starts] == [8, 16]
    assert starts[1]["weights"] == hashes[0] != starts[0]["weights"]
    assert m.config.train_height == 16


def test_gradients_finite_and_logits_bounded():
    m = FlagDiT(tiny_config())
    ds = PatternDataset(8, 20)
    opt = Adam(m.parameters(), 1e-3)
    rng = np.random.default_rng(0)
    for step in range(5):
        g, lab = ds.sample(rng, 4)
        res = train_step(m, opt, g, lab, TrainConfig(lr=1e-3), rng, step, monitor_logits=True)
        assert np.isfinite(res.grad_norm) and res.max_logit is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics():
    m = FlagDiT(tiny_config())
    m.params["final.b"].data[:] = np.inf
    g, lab = PatternDataset(8, 4).sample(np.random.default_rng(0), 2)
    with pytest.raises(NumericalError, match=r"step 7.*t=\["):
        train_step(m, Adam(m.parameters(), 1e-3), g, lab, TrainConfig(), np.random.default_rng(0),
                   step=7)


def test_cfg_dropout_and_patch_mask():
    tcfg = TrainConfig(cfg_dropout=1.0)
    g, lab = PatternDataset(8, 4).sample(np.random.default_rng(0), 4)
    batch, *_, prompts = make_training_batch(g, lab, tcfg, np.random.default_rng(0), 2)
    assert np.all(prompts == 0)
    assert batch.patch_mask.sum() == 4 * 16 and np.all(batch.kinds[batch.patch_mask] == PATCH)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(time_sampler="beta")
