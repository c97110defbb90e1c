"""Encoder-decoder dialogue model with a single continuous response latent.

The encoder is shared between the dialogue context (token + turn + role +
position embeddings) and the posterior input ``[LATENT, r_1 .. r_n, EOS]``,
whose first hidden state is mapped by a small MLP to the latent ``z0``.
The decoder receives the latent through per-layer memory: ``W_M^l z`` is
split into one key and one value vector that are prepended to the inputs
of that layer's self-attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    causal_allowed,
    key_padding_allowed,
)
from .tensor import Tensor, no_grad
from .tokenizer import BOS, EOS, LATENT, PAD, SEP

IGNORE = -100
BANNED_OUTPUT_IDS = (PAD, BOS, SEP, LATENT)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    enc_layers: int = 2
    dec_layers: int = 2
    max_turns: int = 16
    n_roles: int = 2
    max_ctx: int = 256
    max_resp: int = 128
    use_latent: bool = True
    latent_norm: bool = True
    tie_embeddings: bool = True
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")

    @property
    def d_latent(self):
        return self.d_model

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderOutput:
    h: Tensor  # [B, Lc, d]
    mask: np.ndarray  # [B, Lc] bool


@dataclass
class LatentState:
    z: Tensor  # [B, d_z]
    kind: str  # "posterior" | "noised" | "denoised"


class DialogModel(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        d = cfg.d_model
        self.tok_emb = Embedding(cfg.vocab_size, d, rng, dt)
        self.enc_pos = Embedding(max(cfg.max_ctx, cfg.max_resp + 1), d, rng, dt)
        self.turn_emb = Embedding(cfg.max_turns + 1, d, rng, dt)
        self.role_emb = Embedding(cfg.n_roles, d, rng, dt)
        self.enc_layers = [EncoderLayer(d, cfg.n_heads, cfg.d_ff, rng, dt, p_drop=cfg.dropout) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d, dt)
        self.dec_pos = Embedding(cfg.max_resp, d, rng, dt)
        self.dec_layers = [DecoderLayer(d, cfg.n_heads, cfg.d_ff, rng, dt, p_drop=cfg.dropout) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d, dt)
        if not cfg.tie_embeddings:
            self.out_proj = Linear(d, cfg.vocab_size, rng, dt)
        if cfg.use_latent:
            self.post_fc1 = Linear(d, d, rng, dt)
            self.post_fc2 = Linear(d, cfg.d_latent, rng, dt)
            self.memory = [Linear(cfg.d_latent, 2 * d, rng, dt, bias=False) for _ in range(cfg.dec_layers)]
            self.bow = Linear(cfg.d_latent, cfg.vocab_size, rng, dt)
        self.encode_context_calls = 0
        self._unit = (T.Tensor(np.ones(cfg.d_latent, dtype=dt)), T.Tensor(np.zeros(cfg.d_latent, dtype=dt)))

    # -- encoder ----------------------------------------------------------
    def _encode(self, x, mask):
        allowed = key_padding_allowed(mask)
        for layer in self.enc_layers:
            x = layer(x, allowed)
        return self.enc_ln(x)

    def encode_context(self, batch):
        self.encode_context_calls += 1
        x = (self.tok_emb(batch.ctx_ids) + self.turn_emb(batch.ctx_turn)
             + self.role_emb(batch.ctx_role) + self.enc_pos(batch.ctx_pos))
        return EncoderOutput(self._encode(x, batch.ctx_mask), batch.ctx_mask)

    def encode_posterior(self, batch):
        ids = batch.post_ids
        if not np.all(ids[:, 0] == LATENT):
            raise ValueError("posterior input must start with the LATENT token in every row")
        if not self.cfg.use_latent:
            raise RuntimeError("model was built without the latent pathway")
        pos = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        h = self._encode(self.tok_emb(ids) + self.enc_pos(pos), batch.post_mask)
        z = self.post_fc2(T.gelu(self.post_fc1(h[:, 0, :])))
        if self.cfg.latent_norm:
            z = T.layer_norm(z, *self._unit)
        return LatentState(z, "posterior")

    # -- decoder ----------------------------------------------------------
    def memory_kv(self, z, layer_index):
        """Key and value memory vectors ``[B, 1, d]`` for decoder layer ``layer_index``."""
        zt = z.z if isinstance(z, LatentState) else z
        kv = self.memory[layer_index](zt)
        d = self.cfg.d_model
        b = zt.shape[0]
        return kv[:, :d].reshape(b, 1, d), kv[:, d:].reshape(b, 1, d)

    def decode_hidden(self, dec_in, h_c, ctx_mask, z=None, memory_visible=True):
        b, length = dec_in.shape
        if length > self.cfg.max_resp:
            raise ValueError(f"decoder input length {length} exceeds max_resp={self.cfg.max_resp}")
        pos = np.broadcast_to(np.arange(length), dec_in.shape)
        x = self.tok_emb(dec_in) + self.dec_pos(pos)
        zt = z.z if isinstance(z, LatentState) else z
        use_mem = zt is not None
        self_allowed = causal_allowed(length, 1 if use_mem else 0)
        if use_mem and not memory_visible:
            self_allowed = self_allowed.copy()
            self_allowed[..., 0] = False
        cross_allowed = key_padding_allowed(ctx_mask)
        h_c = h_c.h if isinstance(h_c, EncoderOutput) else h_c
        for li, layer in enumerate(self.dec_layers):
            mk = mv = None
            if use_mem:
                mk, mv = self.memory_kv(zt, li)
            x = layer(x, self_allowed, h_c, cross_allowed, mk, mv)
        return self.dec_ln(x)

    def output_logits(self, hidden):
        if self.cfg.tie_embeddings:
            return T.matmul(hidden, self.tok_emb.weight.T)
        return self.out_proj(hidden)

    def decode_logits(self, dec_in, h_c, ctx_mask, z=None, memory_visible=True):
        """Teacher-forced next-token logits ``[B, Lr, V]``."""
        return self.output_logits(self.decode_hidden(dec_in, h_c, ctx_mask, z, memory_visible))

    # -- heads and losses -------------------------------------------------
    def bow_logits(self, z):
        zt = z.z if isinstance(z, LatentState) else z
        return self.bow(zt)

    def bow_loss(self, z0, response_ids, response_mask):
        """Mean ``-log softmax(bow_logits)[r_n]`` over the response words (EOS and PAD excluded)."""
        logits = self.bow_logits(z0)
        b, length = response_ids.shape
        keep = np.asarray(response_mask, bool) & (response_ids != EOS)
        targets = np.where(keep, response_ids, IGNORE).reshape(-1)
        rep = logits[np.repeat(np.arange(b), length)]
        return T.cross_entropy_logits(rep, targets, IGNORE)

    def nll_loss(self, batch, h_c, z):
        logits = self.decode_logits(batch.dec_in, h_c, batch.ctx_mask, z)
        targets = np.where(batch.response_mask, batch.response_ids, IGNORE).reshape(-1)
        return T.cross_entropy_logits(logits.reshape(-1, self.cfg.vocab_size), targets, IGNORE)

    # -- inference --------------------------------------------------------
    def next_token_logprobs(self, prefixes, h_c, ctx_mask, z=None):
        with no_grad():
            logits = self.decode_logits(prefixes, h_c, ctx_mask, z)
            return T.log_softmax(logits[:, -1, :]).data

    def generate(self, h_c, ctx_mask, z=None, beam_size=5, max_len=None):
        """Beam-search one response per row of ``h_c`` (and ``z``); returns id lists without EOS."""
        h = h_c.h if isinstance(h_c, EncoderOutput) else h_c
        zt = z.z if isinstance(z, LatentState) else z
        max_len = self.cfg.max_resp if max_len is None else min(max_len, self.cfg.max_resp)
        hd = h.data
        zd = None if zt is None else np.asarray(zt.data if isinstance(zt, Tensor) else zt)

        def step(prefixes, rows):
            zz = None if zd is None else Tensor(zd[rows])
            return self.next_token_logprobs(prefixes, Tensor(hd[rows]), ctx_mask[rows], zz)

        return beam_search(step, hd.shape[0], beam_size, max_len)


def beam_search(step_logprobs, n_rows, beam_size, max_len, bos=BOS, eos=EOS, banned=BANNED_OUTPUT_IDS):
    """Length-normalised beam search.

    ``step_logprobs(prefixes[N, t], rows[N]) -> [N, V]`` scores the next token
    for each live hypothesis (``rows`` maps a hypothesis to its input row).
    At each step the ``beam_size`` best expansions of every row are kept;
    expansions ending in ``eos`` retire as finished. Hypotheses are ranked by
    total log-probability divided by the number of generated tokens (EOS
    included). Ties resolve to the earlier candidate. With ``beam_size=1``
    this is greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    prefixes = np.full((n_rows, 1), bos, dtype=np.int64)
    rows = np.arange(n_rows)
    scores = np.zeros(n_rows)
    finished = [[] for _ in range(n_rows)]
    banned = [b for b in banned if b != eos]
    for t in range(1, max_len + 1):
        if len(rows) == 0:
            break
        lp = np.asarray(step_logprobs(prefixes, rows), dtype=np.float64)
        lp[:, banned] = -np.inf
        cand = scores[:, None] + lp
        v = cand.shape[1]
        new_pref, new_rows, new_scores = [], [], []
        for r in range(n_rows):
            idx = np.nonzero(rows == r)[0]
            if len(idx) == 0:
                continue
            flat = cand[idx].reshape(-1)
            order = np.argsort(-flat, kind="stable")[:beam_size]
            for o in order:
                s = flat[o]
                if not np.isfinite(s):
                    continue
                h, tok = idx[o // v], int(o % v)
                seq = prefixes[h, 1:].tolist() + [tok]
                if tok == eos:
                    finished[r].append((s / t, seq[:-1]))
                else:
                    new_pref.append(prefixes[h].tolist() + [tok])
                    new_rows.append(r)
                    new_scores.append(s)
        if t == max_len:
            for p, r, s in zip(new_pref, new_rows, new_scores):
                finished[r].append((s / t, p[1:]))
            break
        if not new_pref:
            break
        prefixes = np.asarray(new_pref, dtype=np.int64)
        rows = np.asarray(new_rows)
        scores = np.asarray(new_scores)
    out = []
    for r in range(n_rows):
        best = None
        for score, seq in finished[r]:
            if best is None or score > best[0]:
                best = (score, seq)
        out.append(best[1] if best else [])
    return out
