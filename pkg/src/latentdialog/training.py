"""Joint training of encoder, decoder and latent denoiser.

One step, in order: encode the context; encode ``[LATENT; response]`` to
``z0``; bag-of-words loss on ``z0``; draw ``t`` and ``eps`` and corrupt
``z0`` to ``z_t``; denoise to ``z0_pred``; latent-denoising loss; NLL of
the response decoded from ``z0_pred``; one backward pass on the sum and one
AdamW update.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .config import RunConfig
from .corpus import CorpusError, EncodedBatch, build_batch
from .diffusion import Denoiser, build_sqrt_schedule, ld_loss, q_sample
from .model import DialogModel
from .nn import Module, dropout_active
from .optim import AdamW, clip_grad_norm
from .serialize import load_arrays, save_arrays
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, record):
        self.record = record
        super().__init__(f"non-finite loss at step {record.step}: {asdict(record)}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainLogRecord:
    step: int
    nll: float
    bow: float
    ld: float
    total: float
    lr: float
    ms: float

    def losses(self):
        """Everything except wall-clock time (for reproducibility comparisons)."""
        return (self.step, self.nll, self.bow, self.ld, self.total, self.lr)


class System(Module):
    """Dialogue model plus (when the latent pathway is on) the latent denoiser."""

    def __init__(self, cfg: RunConfig, vocab_size):
        rng = np.random.default_rng([cfg.seed, 0])
        self.cfg = cfg
        self.model = DialogModel(cfg.model_config(vocab_size), rng)
        self.denoiser = (Denoiser(cfg.denoiser_config(), cfg.d_model, rng, d_context=cfg.d_model)
                         if cfg.use_latent else None)
        self.schedule = build_sqrt_schedule(cfg.T, cfg.schedule_s)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)


def lr_at(step, cfg):
    """Linear warmup from ``init_lr`` to ``lr`` over ``warmup`` steps, constant afterwards."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    w = cfg.warmup
    if w == 0 or step >= w:
        return cfg.lr
    return cfg.init_lr + (cfg.lr - cfg.init_lr) * step / w


def trim(batch: EncodedBatch):
    """Drop trailing columns that are padding in every row."""
    lc = max(int(batch.ctx_mask.sum(axis=1).max()), 1)
    lr = max(int(batch.response_mask.sum(axis=1).max()), 1)
    return EncodedBatch(
        batch.ctx_ids[:, :lc], batch.ctx_turn[:, :lc], batch.ctx_role[:, :lc], batch.ctx_pos[:, :lc],
        batch.ctx_mask[:, :lc], batch.dec_in[:, :lr], batch.response_ids[:, :lr], batch.response_mask[:, :lr],
        batch.post_ids[:, :lr + 1], batch.post_mask[:, :lr + 1], batch.n_truncated,
    )


def draw_noise(rng, batch_size, d, schedule, dtype):
    """Per-example timesteps and Gaussian noise."""
    t = rng.integers(1, schedule.T + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, d)).astype(dtype)
    return t, eps


def compute_losses(system, batch, t, eps):
    """Return a dict of scalar Tensors: ``nll``, ``bow``, ``ld`` and weighted ``total``."""
    cfg = system.cfg
    model = system.model
    enc = model.encode_context(batch)
    if not cfg.use_latent:
        nll = model.nll_loss(batch, enc.h, None)
        zero = Tensor(np.zeros((), dtype=system.dtype))
        return {"nll": nll, "bow": zero, "ld": zero, "total": nll * cfg.w_nll}
    z0 = model.encode_posterior(batch).z
    bow = model.bow_loss(z0, batch.response_ids, batch.response_mask)
    z_t = q_sample(z0, t, eps, system.schedule)
    z0_pred = system.denoiser(z_t, t, enc.h, enc.mask)
    ld = ld_loss(z0_pred, z0)
    nll = model.nll_loss(batch, enc.h, z0_pred)
    total = nll * cfg.w_nll + bow * cfg.w_bow + ld * cfg.w_ld
    return {"nll": nll, "bow": bow, "ld": ld, "total": total}


def train_step(system, batch, opt, step, rng):
    """Run one optimisation step and return its log record."""
    cfg = system.cfg
    t0 = time.perf_counter()
    t, eps = draw_noise(rng, batch.size, cfg.d_model, system.schedule, system.dtype)
    with dropout_active(rng):
        losses = compute_losses(system, batch, t, eps)
    lr = lr_at(step, cfg)
    rec = TrainLogRecord(step, float(losses["nll"].data), float(losses["bow"].data), float(losses["ld"].data),
                         float(losses["total"].data), lr, 0.0)
    if not all(math.isfinite(v) for v in (rec.nll, rec.bow, rec.ld, rec.total)):
        raise TrainingDiverged(rec)
    opt.zero_grad()
    losses["total"].backward()
    clip_grad_norm(system.parameters(), cfg.grad_clip)
    opt.step(lr)
    rec.ms = (time.perf_counter() - t0) * 1000.0
    return rec


def make_optimizer(system):
    cfg = system.cfg
    return AdamW(system.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def step_rng(seed, step):
    return np.random.default_rng([seed, 4, step])


def batch_rows(step, n, batch_size, seed):
    """Sample indices for ``step``: a fresh permutation per epoch, remainder dropped."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, k = divmod(step - 1, per_epoch)
    perm = np.random.default_rng([seed, 3, epoch]).permutation(n)
    return perm[k * bs:(k + 1) * bs]


def evaluate_loss(system, batch, batch_size=None):
    """Mean total loss over ``batch`` with a fixed noise draw (comparable across calls)."""
    cfg = system.cfg
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng([cfg.seed, 5])
    total, n = 0.0, 0
    with no_grad():
        for start in range(0, batch.size, bs):
            sub = trim(batch.rows(np.arange(start, min(start + bs, batch.size))))
            t, eps = draw_noise(rng, sub.size, cfg.d_model, system.schedule, system.dtype)
            total += float(compute_losses(system, sub, t, eps)["total"].data) * sub.size
            n += sub.size
    return total / n


def select_best(dev_losses):
    """Index of the lowest dev loss (first one on ties)."""
    if not dev_losses:
        raise ValueError("no dev evaluations")
    return int(np.argmin(dev_losses))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, system, vocab, opt=None, **meta):
    arrays = {f"param/{k}": v for k, v in system.state_dict().items()}
    if opt is not None:
        arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
        meta["opt_step"] = opt.state.step
    meta.update(config=system.cfg.to_dict(), vocab_size=vocab.size, vocab_fingerprint=vocab.fingerprint())
    tmp = path + ".tmp"
    save_arrays(tmp, arrays, meta)
    os.replace(tmp, path)


def load_checkpoint(path, vocab=None):
    """Rebuild the system from a checkpoint; returns ``(system, meta, arrays)``."""
    arrays, meta = load_arrays(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: no config block")
    if vocab is not None:
        if vocab.size != meta["vocab_size"] or vocab.fingerprint() != meta["vocab_fingerprint"]:
            raise CheckpointError(f"{path}: checkpoint was trained with a different vocabulary")
    cfg = RunConfig.from_dict(meta["config"])
    system = System(cfg, meta["vocab_size"])
    system.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return system, meta, arrays


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    best_path: str
    last_path: str
    best_step: int
    best_dev: float
    records: list
    dev_history: list


def fit(cfg, train_samples, dev_samples, vocab, out_dir, resume=False, log_stream=None):
    """Train for ``cfg.steps`` steps, keeping the checkpoint with the lowest dev loss.

    Writes ``best.ckpt``, ``last.ckpt`` (resumable) and ``train_log.jsonl`` to
    ``out_dir``. With ``resume=True`` training continues from ``last.ckpt``.
    """
    if not dev_samples:
        raise CorpusError("dev set is empty; checkpoint selection needs dev data")
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    log_path = os.path.join(out_dir, "train_log.jsonl")

    train = build_batch(train_samples, vocab, cfg.max_ctx, cfg.max_resp, cfg.max_turns)
    dev = build_batch(dev_samples, vocab, cfg.max_ctx, cfg.max_resp, cfg.max_turns)

    start = 1
    best_dev, best_step = math.inf, 0
    dev_history = []
    if resume:
        system, meta, arrays = load_checkpoint(last_path, vocab)
        if system.cfg.to_dict() != cfg.to_dict():
            raise CheckpointError("resume config differs from the checkpoint config")
        opt = make_optimizer(system)
        opt.load_state_arrays({k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")},
                              meta["opt_step"])
        start = meta["step"] + 1
        best_dev, best_step = meta["best_dev"], meta["best_step"]
        dev_history = [tuple(x) for x in meta["dev_history"]]
        _truncate_log(log_path, meta["step"])
    else:
        system = System(cfg, vocab.size)
        opt = make_optimizer(system)
        open(log_path, "w").close()

    records = []
    with open(log_path, "a", encoding="utf-8") as logf:
        for step in range(start, cfg.steps + 1):
            idx = batch_rows(step, train.size, cfg.batch_size, cfg.seed)
            rec = train_step(system, trim(train.rows(idx)), opt, step, step_rng(cfg.seed, step))
            records.append(rec)
            line = json.dumps(asdict(rec))
            logf.write(line + "\n")
            if log_stream is not None:
                log_stream.write(line + "\n")
            if step % cfg.eval_every == 0 or step == cfg.steps:
                dev_loss = evaluate_loss(system, dev)
                dev_history.append((step, dev_loss))
                log.info("step %d  train %.4f  dev %.4f", step, rec.total, dev_loss)
                if dev_loss < best_dev:
                    best_dev, best_step = dev_loss, step
                    save_checkpoint(best_path, system, vocab, step=step, best_dev=best_dev, best_step=best_step)
                logf.flush()
                save_checkpoint(last_path, system, vocab, opt, step=step, best_dev=best_dev,
                                best_step=best_step, dev_history=dev_history)
    return FitResult(best_path, last_path, best_step, best_dev, records, dev_history)


def _truncate_log(path, last_step):
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        keep = [line for line in fh if line.strip() and json.loads(line)["step"] <= last_step]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(keep)


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [TrainLogRecord(**json.loads(line)) for line in fh if line.strip()]
