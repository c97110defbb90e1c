"""Dialogue samples, batch assembly, and a synthetic one-to-many corpus."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .tokenizer import BOS, EOS, LATENT, PAD, SEP, normalize

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Turn:
    role: int
    text: str


@dataclass(frozen=True)
class DialogueSample:
    context: tuple  # of Turn, oldest first
    response: str

    def __post_init__(self):
        validate_context(self.context)

    @classmethod
    def from_pairs(cls, turns, response):
        return cls(tuple(Turn(int(r), str(t)) for r, t in turns), response)

    def to_record(self):
        return {"context": [{"role": t.role, "text": t.text} for t in self.context], "response": self.response}


def validate_context(turns):
    if not turns:
        raise CorpusError("context must contain at least one turn")
    for i, t in enumerate(turns):
        if t.role not in (0, 1):
            raise CorpusError(f"turn {i}: role must be 0 or 1, got {t.role!r}")
        if i and t.role == turns[i - 1].role:
            raise CorpusError(f"turn {i}: roles must alternate between consecutive turns")


def context_key(context):
    """Stable hash of a normalised context, used to key oracle files and outputs."""
    canon = json.dumps([[t.role, normalize(t.text)] for t in context], separators=(",", ":"))
    return hashlib.sha1(canon.encode()).hexdigest()[:16]


def parse_record(rec, where="record"):
    if not isinstance(rec, dict):
        raise CorpusError(f"{where}: expected an object")
    if "context" not in rec or "response" not in rec:
        raise CorpusError(f"{where}: missing 'context' or 'response'")
    ctx = rec["context"]
    if not isinstance(ctx, list):
        raise CorpusError(f"{where}: 'context' must be an array")
    turns = []
    for j, t in enumerate(ctx):
        if not isinstance(t, dict) or "role" not in t or "text" not in t:
            raise CorpusError(f"{where}: context[{j}] needs 'role' and 'text'")
        turns.append(Turn(t["role"], str(t["text"])))
    if not isinstance(rec["response"], str):
        raise CorpusError(f"{where}: 'response' must be a string")
    try:
        return DialogueSample(tuple(turns), rec["response"])
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_jsonl(path):
    """Read one sample per line. All malformed lines are reported together."""
    samples, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            try:
                samples.append(parse_record(rec, f"line {lineno}"))
            except CorpusError as exc:
                errors.append(str(exc))
    if errors:
        raise CorpusError(f"{path}: " + "; ".join(errors))
    return samples


def write_jsonl(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def samples_from_dialogue(utterances):
    """Every turn after the first becomes a response to the turns before it.

    Speakers alternate starting with role 0.
    """
    turns = [Turn(i % 2, u.strip()) for i, u in enumerate(utterances)]
    return [DialogueSample(tuple(turns[:k]), turns[k].text) for k in range(1, len(turns))]


def convert_eou_dump(src, dst, sep="__eou__"):
    """Convert a text dump with one dialogue per line, utterances ending in ``sep``, to corpus JSONL."""
    samples = []
    with open(src, encoding="utf-8") as fh:
        for line in fh:
            utts = [u for u in (x.strip() for x in line.split(sep)) if u]
            samples.extend(samples_from_dialogue(utts))
    write_jsonl(dst, samples)
    return len(samples)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class EncodedBatch:
    ctx_ids: np.ndarray  # [B, Lc]
    ctx_turn: np.ndarray
    ctx_role: np.ndarray
    ctx_pos: np.ndarray
    ctx_mask: np.ndarray  # bool
    dec_in: np.ndarray  # [B, Lr]  BOS r_1 .. r_n
    response_ids: np.ndarray  # [B, Lr]  r_1 .. r_n EOS (decoder targets)
    response_mask: np.ndarray  # bool
    post_ids: np.ndarray  # [B, Lr + 1]  LATENT r_1 .. r_n EOS
    post_mask: np.ndarray
    n_truncated: int = 0

    @property
    def size(self):
        return self.ctx_ids.shape[0]

    def rows(self, idx):
        idx = np.asarray(idx)
        fields = {k: getattr(self, k)[idx] for k in self.__dataclass_fields__ if k != "n_truncated"}
        return EncodedBatch(**fields, n_truncated=self.n_truncated)


def encode_context_turns(context, vocab, max_ctx, max_turns=None):
    """Token, turn, and role ids for one context, truncated oldest-first.

    Each turn is followed by SEP. The turn id counts back from the response:
    the last context turn is 1. Returns ``(ids, turns, roles, truncated)``.
    """
    encoded = [vocab.encode(t.text) + [SEP] for t in context]
    roles = [t.role for t in context]
    truncated = False
    keep = len(encoded)
    if max_turns is not None and keep > max_turns:
        keep, truncated = max_turns, True
    while keep > 1 and sum(len(e) for e in encoded[-keep:]) > max_ctx:
        keep -= 1
        truncated = True
    encoded, roles = encoded[-keep:], roles[-keep:]
    if len(encoded[-1]) > max_ctx:
        encoded[-1] = encoded[-1][-max_ctx:]
        truncated = True
    ids, turn_ids, role_ids = [], [], []
    n = len(encoded)
    for i, (toks, role) in enumerate(zip(encoded, roles)):
        ids.extend(toks)
        turn_ids.extend([n - i] * len(toks))
        role_ids.extend([role] * len(toks))
    return ids, turn_ids, role_ids, truncated


def build_batch(samples, vocab, max_ctx, max_resp, max_turns=None):
    """Assemble padded id grids. Samples whose response (+EOS) exceeds ``max_resp`` are skipped."""
    if not samples:
        raise CorpusError("build_batch needs at least one sample")
    rows = []
    n_trunc = 0
    for s in samples:
        resp = vocab.encode(s.response)
        if len(resp) + 1 > max_resp:
            log.warning("skipping sample: response has %d tokens (+EOS) > max_resp=%d", len(resp), max_resp)
            continue
        ids, turns, roles, truncated = encode_context_turns(s.context, vocab, max_ctx, max_turns)
        n_trunc += truncated
        rows.append((ids, turns, roles, resp))
    if not rows:
        raise CorpusError("every sample was skipped (responses too long)")
    b = len(rows)
    lc = max(len(r[0]) for r in rows)
    lr = max(len(r[3]) for r in rows) + 1
    ctx_ids = np.full((b, lc), PAD, dtype=np.int64)
    ctx_turn = np.zeros((b, lc), dtype=np.int64)
    ctx_role = np.zeros((b, lc), dtype=np.int64)
    ctx_mask = np.zeros((b, lc), dtype=bool)
    dec_in = np.full((b, lr), PAD, dtype=np.int64)
    resp_ids = np.full((b, lr), PAD, dtype=np.int64)
    resp_mask = np.zeros((b, lr), dtype=bool)
    for i, (ids, turns, roles, resp) in enumerate(rows):
        n = len(ids)
        ctx_ids[i, :n] = ids
        ctx_turn[i, :n] = turns
        ctx_role[i, :n] = roles
        ctx_mask[i, :n] = True
        m = len(resp) + 1
        dec_in[i, :m] = [BOS] + resp
        resp_ids[i, :m] = resp + [EOS]
        resp_mask[i, :m] = True
    ctx_pos = np.broadcast_to(np.arange(lc, dtype=np.int64), (b, lc)).copy()
    post_ids = np.concatenate([np.full((b, 1), LATENT, dtype=np.int64), resp_ids], axis=1)
    post_mask = np.concatenate([np.ones((b, 1), dtype=bool), resp_mask], axis=1)
    return EncodedBatch(ctx_ids, ctx_turn, ctx_role, ctx_pos, ctx_mask, dec_in, resp_ids, resp_mask,
                        post_ids, post_mask, n_trunc)


def context_batch(contexts, vocab, max_ctx, max_turns=None):
    """Context-only batch for inference (response fields hold a lone EOS)."""
    return build_batch([DialogueSample(tuple(c), "") for c in contexts], vocab, max_ctx, 2, max_turns)


# ---------------------------------------------------------------------------
# synthetic one-to-many corpus

TOPICS = (
    "pizza", "jazz", "soccer", "winter", "coffee", "movies", "cats", "hiking", "tea", "chess",
    "paris", "sushi", "rain", "guitar", "books", "dogs", "tennis", "summer", "cooking", "museums",
    "trains", "poetry", "yoga", "cheese", "opera", "camping", "painting", "skiing", "podcasts", "gardening",
)
GREETINGS = ("hi", "hello", "hey there", "good morning", "hi friend", "good evening", "hello again")
QUESTIONS = (
    "what do you think of {x} ?",
    "do you like {x} ?",
    "how do you feel about {x} ?",
    "any thoughts on {x} ?",
    "tell me about {x} .",
)
# every template puts a different word right before the subject, so each
# (template, context) pair contributes its own bigram
ANSWERS = (
    "i love {x}",
    "not a fan of {x}",
    "i never tried {x}",
    "my friend likes {x}",
    "we talked about {x}",
    "i am bored with {x}",
    "nothing beats {x}",
    "i really miss {x}",
    "honestly i hate {x}",
    "i want more {x}",
    "i enjoy {x}",
    "i avoid {x}",
)
MODIFIERS = (
    "cheap", "old", "new", "local", "fancy", "homemade", "french", "modern", "classic", "live",
    "fresh", "hot", "cold", "weird", "famous", "simple", "strange", "quiet", "loud", "small",
    "big", "good", "bad", "early", "late", "free", "rare", "daily", "spicy", "sweet",
    "dark", "bright", "slow", "fast", "long", "short", "odd", "plain", "rich", "wild",
    "calm", "cozy", "crazy", "funny", "gentle", "grand", "huge", "tiny", "lazy", "lively",
    "lovely", "lucky", "messy", "neat", "noisy", "polite", "proud", "quick", "rough", "royal",
    "rustic", "salty", "sharp", "shiny", "silly", "smooth", "soft", "sour", "steady", "sunny",
    "tall", "tasty", "tough", "urban", "vivid", "warm", "wet", "windy", "wise", "young",
    "ancient", "basic", "bold", "brave", "busy", "clean", "clever", "cool", "dusty", "eager",
    "exotic", "fair", "fine", "fuzzy", "giant", "happy", "humble", "icy", "jolly", "kind",
)
CONTEXTS_PER_TOPIC = 25
CONTEXTS_PER_SUBJECT = 5


@dataclass
class SyntheticOracle:
    """Maps each context key to its full set of valid (normalised) responses."""

    valid: dict
    seed: int

    def is_valid(self, context, response):
        key = context_key(context)
        if key not in self.valid:
            raise KeyError(f"context {key} not covered by the oracle")
        return normalize(response) in self.valid[key]

    def responses(self, context):
        return self.valid[context_key(context)]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"seed": self.seed, "valid": {k: sorted(v) for k, v in sorted(self.valid.items())}}, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls({k: frozenset(v) for k, v in raw["valid"].items()}, raw["seed"])


def synthetic_contexts(n_contexts, k_valid, seed, per_topic=CONTEXTS_PER_TOPIC, per_subject=CONTEXTS_PER_SUBJECT):
    """Contexts (greeting, question about a subject) and their valid-response sets.

    A subject is ``modifier topic``; ``per_subject`` consecutive contexts ask
    about the same subject in different words and ``per_topic`` consecutive
    contexts share a topic. Contexts with the same subject share a valid set.
    """
    if k_valid < 4:
        raise CorpusError("k_valid must be at least 4")
    if k_valid > len(ANSWERS):
        raise CorpusError(f"k_valid must be at most {len(ANSWERS)}")
    phrasings = [(g, q) for g in GREETINGS for q in QUESTIONS]
    if not 1 <= per_subject <= len(phrasings):
        raise CorpusError(f"per_subject must lie in [1, {len(phrasings)}]")
    if per_topic % per_subject or per_topic // per_subject > len(MODIFIERS):
        raise CorpusError("per_topic must be a multiple of per_subject, with at most one subject per modifier")
    n_topics = -(-n_contexts // per_topic)
    if n_topics > len(TOPICS):
        raise CorpusError(f"at most {len(TOPICS) * per_topic} synthetic contexts are available")
    rng = np.random.default_rng(seed)
    mods = rng.permutation(len(MODIFIERS))
    out = []
    picks = []
    for j in range(n_contexts):
        si = j // per_subject
        if j % per_subject == 0:
            picks = list(rng.choice(len(phrasings), size=per_subject, replace=False))
        subject = f"{MODIFIERS[mods[si % len(MODIFIERS)]]} {TOPICS[j // per_topic]}"
        g, q = phrasings[picks[j % per_subject]]
        answers = frozenset(normalize(a.format(x=subject)) for a in ANSWERS[:k_valid])
        out.append(((Turn(0, g), Turn(1, q.format(x=subject))), answers))
    return out


def generate_synthetic(seed, n_contexts, k_valid, per_topic=CONTEXTS_PER_TOPIC, per_subject=CONTEXTS_PER_SUBJECT):
    """Return ``(samples, oracle)``: one uniformly drawn valid response per context."""
    items = synthetic_contexts(n_contexts, k_valid, seed, per_topic, per_subject)
    rng = np.random.default_rng([seed, 1])
    samples, valid = [], {}
    for ctx, answers in items:
        choices = sorted(answers)
        valid[context_key(ctx)] = answers
        samples.append(DialogueSample(ctx, choices[rng.integers(len(choices))]))
    return samples, SyntheticOracle(valid, seed)


def resample_responses(samples, oracle, seed, draws=1):
    """Same contexts, fresh independent draws from each valid set (a held-out split)."""
    rng = np.random.default_rng([seed, 2])
    out = []
    for _ in range(draws):
        for s in samples:
            choices = sorted(oracle.responses(s.context))
            out.append(DialogueSample(s.context, choices[rng.integers(len(choices))]))
    return out
