"""Response generation: encode a context once, draw latents, beam-decode each."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import context_batch
from .diffusion import sample_latent
from .tensor import Tensor, no_grad


@dataclass
class Candidate:
    seed: int
    text: str
    ids: list


@dataclass
class PhaseTimes:
    encode: float = 0.0
    denoise: float = 0.0
    decode: float = 0.0
    calls: dict = field(default_factory=dict)


class ResponseGenerator:
    def __init__(self, system, vocab, steps=50, eta=0.0, beam=5, max_len=None):
        self.system = system
        self.vocab = vocab
        self.steps = steps
        self.eta = eta
        self.beam = beam
        self.max_len = max_len

    @property
    def model(self):
        return self.system.model

    def context_truncated(self, context):
        cfg = self.system.cfg
        return context_batch([context], self.vocab, cfg.max_ctx, cfg.max_turns).n_truncated > 0

    def sample(self, context, n_samples=1, seed=0, steps=None, eta=None, beam=None, times=None):
        """``n_samples`` candidates for one context; candidate ``i`` uses latent seed ``seed + i``."""
        cfg = self.system.cfg
        steps = self.steps if steps is None else steps
        eta = self.eta if eta is None else eta
        beam = self.beam if beam is None else beam
        times = times if times is not None else PhaseTimes()
        seeds = [seed + i for i in range(n_samples)]

        t0 = time.perf_counter()
        with no_grad():
            batch = context_batch([context], self.vocab, cfg.max_ctx, cfg.max_turns)
            enc = self.model.encode_context(batch)
        t1 = time.perf_counter()
        rows = np.zeros(n_samples, dtype=np.int64)
        h = Tensor(enc.h.data[rows])
        mask = enc.mask[rows]
        if cfg.use_latent:
            z = sample_latent(self.system.denoiser, h, mask, self.system.schedule, steps, eta, seeds)
            t2 = time.perf_counter()
            ids = self.model.generate(h, mask, Tensor(z), beam, self.max_len)
        else:
            t2 = time.perf_counter()
            # without a latent every candidate is the same deterministic decode
            ids = self.model.generate(h[:1], mask[:1], None, beam, self.max_len) * n_samples
        t3 = time.perf_counter()
        times.encode += t1 - t0
        times.denoise += t2 - t1
        times.decode += t3 - t2
        return [Candidate(s, self.vocab.decode(i), i) for s, i in zip(seeds, ids)]
