import json
import os

import numpy as np
import pytest

from latentdialog.config import ConfigError, RunConfig
from latentdialog.corpus import CorpusError, build_batch, generate_synthetic, resample_responses
from latentdialog.tokenizer import train_bpe
from latentdialog.training import (CheckpointError, System, TrainingDiverged, batch_rows, compute_losses, draw_noise,
                                   fit, load_checkpoint, lr_at, make_optimizer, read_log, save_checkpoint,
                                   select_best, step_rng, train_step, trim)

TINY = dict(d_model=16, n_heads=2, d_ff=32, enc_layers=1, dec_layers=1, den_layers=1, time_dim=16, T=100,
            max_ctx=32, max_resp=12, batch_size=8, eval_every=5, dtype="float64")


@pytest.fixture(scope="module")
def data():
    train, oracle = generate_synthetic(0, 20, 4)
    dev = resample_responses(train, oracle, 0)
    texts = [t.text for s in train for t in s.context] + [s.response for s in train + dev]
    return train, dev, train_bpe(texts, 300)


def test_lr_schedule():
    cfg = RunConfig(steps=100, lr=1e-3, init_lr=1e-7, warmup_steps=10)
    assert lr_at(1, cfg) == pytest.approx(1e-7 + (1e-3 - 1e-7) / 10)
    assert lr_at(10, cfg) == 1e-3
    assert lr_at(5, cfg) == pytest.approx(1e-7 + (1e-3 - 1e-7) * 0.5)
    assert lr_at(99, cfg) == 1e-3
    assert RunConfig(steps=100).warmup == 10
    assert lr_at(1, RunConfig(steps=100, warmup_steps=0)) == RunConfig().lr
    with pytest.raises(ValueError):
        lr_at(0, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(steps=10, warmup_steps=10)
    with pytest.raises(ConfigError):
        RunConfig(lr=0.0)
    with pytest.raises(ConfigError):
        RunConfig(d_model=10, n_heads=4)


def test_select_best():
    assert select_best([3.0, 2.5, 2.7]) == 1
    assert select_best([2.0, 2.0]) == 0
    with pytest.raises(ValueError):
        select_best([])


def test_batch_rows_cover_each_epoch():
    rows = np.concatenate([batch_rows(s, 20, 5, 0) for s in range(1, 5)])
    assert sorted(rows) == list(range(20))
    assert not np.array_equal(batch_rows(1, 20, 5, 0), batch_rows(5, 20, 5, 0))
    assert np.array_equal(batch_rows(3, 20, 5, 1), batch_rows(3, 20, 5, 1))


def test_loss_decomposition(data):
    train, _, vocab = data
    cfg = RunConfig(**TINY)
    system = System(cfg, vocab.size)
    b = trim(build_batch(train[:8], vocab, cfg.max_ctx, cfg.max_resp))
    t, eps = draw_noise(step_rng(0, 1), b.size, cfg.d_model, system.schedule, system.dtype)
    assert t.min() >= 1 and t.max() <= cfg.T
    losses = compute_losses(system, b, t, eps)
    total = sum(float(losses[k].data) for k in ("nll", "bow", "ld"))
    assert float(losses["total"].data) == pytest.approx(total, abs=1e-6)


def test_ablation_has_no_latent_losses(data):
    train, _, vocab = data
    cfg = RunConfig(**TINY, use_latent=False)
    system = System(cfg, vocab.size)
    assert system.denoiser is None
    b = trim(build_batch(train[:8], vocab, cfg.max_ctx, cfg.max_resp))
    rec = train_step(system, b, make_optimizer(system), 1, step_rng(0, 1))
    assert rec.bow == 0 and rec.ld == 0 and rec.total == rec.nll


def test_train_step_is_deterministic(data):
    train, _, vocab = data
    cfg = RunConfig(**TINY)
    b = trim(build_batch(train[:8], vocab, cfg.max_ctx, cfg.max_resp))
    runs = []
    for _ in range(2):
        system = System(cfg, vocab.size)
        opt = make_optimizer(system)
        runs.append([train_step(system, b, opt, s, step_rng(0, s)).losses() for s in range(1, 4)])
    assert runs[0] == runs[1]


def test_non_finite_loss_aborts(data):
    train, _, vocab = data
    cfg = RunConfig(**TINY)
    system = System(cfg, vocab.size)
    system.model.tok_emb.weight.data[:] = np.nan
    b = trim(build_batch(train[:4], vocab, cfg.max_ctx, cfg.max_resp))
    with pytest.raises(TrainingDiverged) as err:
        train_step(system, b, make_optimizer(system), 1, step_rng(0, 1))
    assert err.value.record.step == 1


def test_loss_drops_by_thirty_percent(data):
    train, _, vocab = data
    cfg = RunConfig(**{**TINY, "steps": 500, "lr": 1e-3, "dtype": "float32"})
    system = System(cfg, vocab.size)
    opt = make_optimizer(system)
    tb = build_batch(train, vocab, cfg.max_ctx, cfg.max_resp)
    totals = [train_step(system, trim(tb.rows(batch_rows(s, tb.size, cfg.batch_size, cfg.seed))), opt, s,
                         step_rng(cfg.seed, s)).total for s in range(1, 501)]
    assert np.mean(totals[-10:]) <= 0.7 * totals[0]


def test_checkpoint_round_trip(data, tmp_path):
    train, _, vocab = data
    cfg = RunConfig(**TINY)
    system = System(cfg, vocab.size)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, system, vocab, step=3)
    loaded, meta, _ = load_checkpoint(path, vocab)
    assert meta["step"] == 3
    for (k, a), (k2, b) in zip(sorted(system.state_dict().items()), sorted(loaded.state_dict().items())):
        assert k == k2 and np.array_equal(a, b)
    other = train_bpe(["something else entirely"], 270)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_fit_is_reproducible(data, tmp_path):
    train, dev, vocab = data
    cfg = RunConfig(**{**TINY, "steps": 12})
    first = fit(cfg, train, dev, vocab, str(tmp_path / "a"))
    second = fit(cfg, train, dev, vocab, str(tmp_path / "b"))
    assert [r.losses() for r in first.records] == [r.losses() for r in second.records]
    assert first.dev_history == second.dev_history
    assert os.path.exists(first.best_path) and os.path.exists(first.last_path)
    assert [s for s, _ in first.dev_history] == [5, 10, 12]
    best = select_best([d for _, d in first.dev_history])
    assert first.best_step == first.dev_history[best][0]


def test_resume_after_interruption_matches_uninterrupted_run(data, tmp_path, monkeypatch):
    train, dev, vocab = data
    cfg = RunConfig(**{**TINY, "steps": 12})
    ref = fit(cfg, train, dev, vocab, str(tmp_path / "ref"))

    import latentdialog.training as tr
    real = tr.train_step

    def dies_at_eight(system, batch, opt, step, rng):
        if step == 8:
            raise KeyboardInterrupt
        return real(system, batch, opt, step, rng)

    monkeypatch.setattr(tr, "train_step", dies_at_eight)
    with pytest.raises(KeyboardInterrupt):
        fit(cfg, train, dev, vocab, str(tmp_path / "run"))
    monkeypatch.setattr(tr, "train_step", real)
    resumed = fit(cfg, train, dev, vocab, str(tmp_path / "run"), resume=True)
    assert resumed.records[0].step == 6
    assert [r.losses() for r in resumed.records] == [r.losses() for r in ref.records[5:]]
    log = read_log(str(tmp_path / "run" / "train_log.jsonl"))
    assert [r.losses() for r in log] == [r.losses() for r in ref.records]
    assert resumed.dev_history == ref.dev_history


def test_resume_rejects_changed_config(data, tmp_path):
    train, dev, vocab = data
    fit(RunConfig(**{**TINY, "steps": 5}), train, dev, vocab, str(tmp_path))
    with pytest.raises(CheckpointError):
        fit(RunConfig(**{**TINY, "steps": 5, "lr": 5e-4}), train, dev, vocab, str(tmp_path), resume=True)


def test_empty_dev_set_is_an_error(data, tmp_path):
    train, _, vocab = data
    with pytest.raises(CorpusError):
        fit(RunConfig(**{**TINY, "steps": 2}), train, [], vocab, str(tmp_path))


def test_log_file_matches_records(data, tmp_path):
    train, dev, vocab = data
    res = fit(RunConfig(**{**TINY, "steps": 6}), train, dev, vocab, str(tmp_path))
    with open(tmp_path / "train_log.jsonl") as fh:
        lines = [json.loads(x) for x in fh]
    assert [x["step"] for x in lines] == list(range(1, 7))
    assert [r.losses() for r in read_log(str(tmp_path / "train_log.jsonl"))] == [r.losses() for r in res.records]


def test_dropout_step_is_deterministic_and_eval_is_not_dropped(data):
    train, dev, vocab = data
    batch = build_batch(train[:8], vocab, 32, 12)
    recs, evals = [], []
    for _ in range(2):
        system = System(RunConfig(steps=10, dropout=0.2, **TINY), vocab.size)
        recs.append(train_step(system, batch, make_optimizer(system), 1, step_rng(0, 1)).total)
        t, eps = draw_noise(np.random.default_rng(1), batch.size, 16, system.schedule, system.dtype)
        evals.append([float(compute_losses(system, batch, t, eps)["total"].data) for _ in range(2)])
    assert recs[0] == recs[1]
    assert evals[0][0] == evals[0][1] == evals[1][0]
    with pytest.raises(ConfigError):
        RunConfig(dropout=1.0)
