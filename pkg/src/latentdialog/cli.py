"""Command-line entry point: synth, train, sample, eval, bench, chat."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys

from .config import ConfigError, RunConfig
from .corpus import (CorpusError, SyntheticOracle, Turn, context_key, generate_synthetic,
                     load_jsonl, resample_responses, validate_context, write_jsonl)
from .inference import PhaseTimes, ResponseGenerator
from .metrics import EvalReport, best_of_n, bleu_n, distinct_n, synthetic_scores
from .serialize import file_sha256
from .tokenizer import Vocab, train_bpe
from .training import CheckpointError, fit, load_checkpoint

log = logging.getLogger("latentdialog")

UPPER_BOUND_CANDIDATES = 10


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command, args, artifacts, config=None, seed=None, started=None):
    """Record what a command consumed and produced; checkpoints are hashed."""
    hashes = {}
    for name, p in artifacts.items():
        if p and os.path.isfile(p) and (p.endswith(".ckpt") or name in ("checkpoint", "vocab")):
            hashes[name] = file_sha256(p)
    manifest = {
        "command": command,
        "argv": args,
        "config": config,
        "seed": seed,
        "artifacts": {k: os.path.abspath(v) for k, v in artifacts.items() if v},
        "sha256": hashes,
        "started": started or _now(),
        "finished": _now(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _vocab_path_for(checkpoint):
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "vocab.txt")


def load_generator(checkpoint, vocab_path=None, **kw):
    vocab = Vocab.load(vocab_path or _vocab_path_for(checkpoint))
    system, meta, _ = load_checkpoint(checkpoint, vocab)
    return ResponseGenerator(system, vocab, **kw), meta


# ---------------------------------------------------------------------------
# synth / train


def cmd_synth(args):
    samples, oracle = generate_synthetic(args.seed, args.n_contexts, args.k_valid)
    dev = resample_responses(samples, oracle, args.seed, draws=args.dev_draws)
    os.makedirs(args.out, exist_ok=True)
    paths = {"train": os.path.join(args.out, "train.jsonl"), "dev": os.path.join(args.out, "dev.jsonl"),
             "oracle": os.path.join(args.out, "oracle.json")}
    write_jsonl(paths["train"], samples)
    write_jsonl(paths["dev"], dev)
    oracle.save(paths["oracle"])
    print(f"wrote {len(samples)} train / {len(dev)} dev samples and an oracle for {len(oracle.valid)} contexts "
          f"to {args.out}")
    return 0


def build_vocab(cfg, train):
    if cfg.vocab:
        return Vocab.load(cfg.vocab)
    texts = [t.text for s in train for t in s.context] + [s.response for s in train]
    return train_bpe(texts, cfg.vocab_size)


def cmd_train(args):
    started = _now()
    cfg = RunConfig.load(args.config)
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed), ("out_dir", args.out)) if v is not None}
    if overrides:
        cfg = cfg.replace(**overrides)
    problems = []
    for key in ("train_corpus", "dev_corpus"):
        p = getattr(cfg, key)
        if not p or not os.path.isfile(p):
            problems.append(f"{key}: file not found ({p!r})")
    if cfg.vocab and not os.path.isfile(cfg.vocab):
        problems.append(f"vocab: file not found ({cfg.vocab!r})")
    if problems:
        raise ConfigError(problems)
    train = load_jsonl(cfg.train_corpus)
    dev = load_jsonl(cfg.dev_corpus)
    vocab = build_vocab(cfg, train)
    os.makedirs(cfg.out_dir, exist_ok=True)
    vocab_path = os.path.join(cfg.out_dir, "vocab.txt")
    vocab.save(vocab_path)
    res = fit(cfg, train, dev, vocab, cfg.out_dir, resume=args.resume)
    log_path = os.path.join(cfg.out_dir, "train_log.jsonl")
    manifest_path = os.path.join(cfg.out_dir, "manifest.json")
    write_manifest(manifest_path, "train", sys.argv[1:] if args.argv is None else args.argv,
                   {"config": os.path.abspath(args.config), "vocab": vocab_path, "best_checkpoint": res.best_path,
                    "last_checkpoint": res.last_path, "train_log": log_path, "train_corpus": cfg.train_corpus,
                    "dev_corpus": cfg.dev_corpus},
                   config=cfg.to_dict(), seed=cfg.seed, started=started)
    print(f"best step {res.best_step}  dev loss {res.best_dev:.4f}")
    print(f"checkpoint {res.best_path}")
    print(f"manifest {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# sample


def parse_turns(items):
    """Inline turns ``role:text``; a bare text alternates roles so the last one is the user's (1)."""
    turns = []
    n = len(items)
    for i, item in enumerate(items):
        head, sep, rest = item.partition(":")
        if sep and head.strip() in ("0", "1"):
            turns.append(Turn(int(head), rest.strip()))
        else:
            turns.append(Turn(1 if (n - 1 - i) % 2 == 0 else 0, item))
    validate_context(turns)
    return tuple(turns)


def read_contexts(path):
    """A context file is either corpus JSONL (responses ignored) or a JSON list of turn lists."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, list):
        out = []
        for i, ctx in enumerate(data):
            turns = tuple(Turn(int(t["role"]), str(t["text"])) for t in ctx)
            try:
                validate_context(turns)
            except CorpusError as exc:
                raise CorpusError(f"{path}: context {i}: {exc}") from None
            out.append(turns)
        return out
    return [s.context for s in load_jsonl(path)]


def cmd_sample(args):
    started = _now()
    gen, _ = load_generator(args.checkpoint, args.vocab, beam=args.beam)
    if args.context:
        contexts = read_contexts(args.context)
    elif args.turns:
        contexts = [parse_turns(args.turns)]
    else:
        raise CorpusError("give a context with --context FILE or --turns TEXT ...")
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for ctx in contexts:
            if gen.context_truncated(ctx):
                print(f"note: context {context_key(ctx)} exceeds the model's context limit; oldest tokens dropped",
                      file=sys.stderr)
            for c in gen.sample(ctx, args.n_samples, args.seed, args.steps, args.eta):
                out.write(json.dumps({"context": context_key(ctx), "seed": c.seed, "steps": args.steps,
                                      "eta": args.eta, "text": c.text}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out:
        write_manifest(args.out + ".manifest.json", "sample", args.argv or sys.argv[1:],
                       {"checkpoint": args.checkpoint, "output": args.out, "context": args.context},
                       seed=args.seed, started=started)
    return 0


# ---------------------------------------------------------------------------
# eval


def evaluate(gen, samples, mode, n_samples=None, seed=0, steps=10, eta=0.0, oracle=None):
    """Build an :class:`EvalReport` for ``samples`` (contexts with references)."""
    if mode == "synthetic" and oracle is None:
        raise CorpusError("synthetic mode needs the oracle file written by 'synth'")
    if mode == "standard":
        n = 1
    elif mode == "upper_bound":
        n = UPPER_BOUND_CANDIDATES
    else:
        n = n_samples or 10
    scored_c, scored_r, outputs = [], [], []
    for s in samples:
        texts = [c.text for c in gen.sample(s.context, n, seed, steps, eta)]
        outputs.append((s.context, texts))
        if mode == "upper_bound":
            scored_c.append(best_of_n(s.context, texts, s.response))
            scored_r.append(s.response)
        else:
            scored_c.extend(texts)
            scored_r.extend([s.response] * len(texts))
    report = EvalReport(mode=mode, bleu1=bleu_n(scored_c, scored_r, 1), bleu2=bleu_n(scored_c, scored_r, 2),
                        distinct1=_safe_distinct(scored_c, 1), distinct2=_safe_distinct(scored_c, 2),
                        n_samples=n, n_contexts=len(samples))
    if mode == "synthetic":
        report.validity, report.diversity = synthetic_scores(outputs, oracle)
    return report, outputs


def _safe_distinct(texts, n):
    try:
        return distinct_n(texts, n)
    except ValueError:
        return 0.0


REPORT_ORDER = ("mode", "n_contexts", "n_samples", "bleu1", "bleu2", "distinct1", "distinct2", "validity", "diversity")


def format_report(report):
    d = report.to_dict()
    lines = []
    for k in REPORT_ORDER:
        v = d.get(k)
        if v is None:
            continue
        lines.append(f"{k:<11s} {v:.4f}" if isinstance(v, float) else f"{k:<11s} {v}")
    return "\n".join(lines)


def cmd_eval(args):
    started = _now()
    oracle = None
    if args.mode == "synthetic":
        path = args.oracle or os.path.join(os.path.dirname(os.path.abspath(args.corpus)), "oracle.json")
        if not os.path.isfile(path):
            raise CorpusError(f"synthetic mode needs an oracle file; {path} not found")
        oracle = SyntheticOracle.load(path)
    gen, _ = load_generator(args.checkpoint, args.vocab, beam=args.beam)
    samples = load_jsonl(args.corpus)
    if args.limit:
        samples = samples[:args.limit]
    report, _ = evaluate(gen, samples, args.mode, args.n_samples, args.seed, args.steps, args.eta, oracle)
    print(format_report(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        write_manifest(args.out + ".manifest.json", "eval", args.argv or sys.argv[1:],
                       {"checkpoint": args.checkpoint, "corpus": args.corpus, "report": args.out},
                       seed=args.seed, started=started)
    return 0


# ---------------------------------------------------------------------------
# bench


def bench(gen, contexts, step_counts, seed=0):
    """Mean seconds per sample for each phase, one sample per context, per step count."""
    rows = []
    for steps in sorted(set(step_counts)):
        times = PhaseTimes()
        for i, ctx in enumerate(contexts):
            gen.sample(ctx, 1, seed + i, steps, 0.0, times=times)
        n = len(contexts)
        rows.append({"steps": steps, "encode": times.encode / n, "denoise": times.denoise / n,
                     "decode": times.decode / n, "total": (times.encode + times.denoise + times.decode) / n,
                     "n_contexts": n})
    return rows


def format_bench(rows):
    lines = [f"{'steps':>6s} {'encode':>10s} {'denoise':>10s} {'decode':>10s} {'total':>10s}"]
    for r in rows:
        lines.append(f"{r['steps']:>6d} {r['encode']:>10.5f} {r['denoise']:>10.5f} {r['decode']:>10.5f} "
                     f"{r['total']:>10.5f}")
    return "\n".join(lines)


def cmd_bench(args):
    started = _now()
    gen, _ = load_generator(args.checkpoint, args.vocab, beam=args.beam)
    contexts = read_contexts(args.contexts)[:args.n_contexts]
    if len(contexts) < args.n_contexts:
        log.warning("only %d contexts available for benchmarking", len(contexts))
    rows = bench(gen, contexts, args.step_counts, args.seed)
    print(format_bench(rows))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        write_manifest(args.out + ".manifest.json", "bench", args.argv or sys.argv[1:],
                       {"checkpoint": args.checkpoint, "contexts": args.contexts, "report": args.out},
                       seed=args.seed, started=started)
    return 0


# ---------------------------------------------------------------------------
# chat


class ChatSession:
    """Rolling dialogue history; the user speaks as role 1 and the model as role 0."""

    USER, BOT = 1, 0

    def __init__(self, generator, seed=0, steps=10, eta=0.0):
        self.gen = generator
        self.seed = seed
        self.steps = steps
        self.eta = eta
        self.history = []
        self.draws = 0

    def _next_seed(self):
        s = self.seed + self.draws
        self.draws += 1
        return s

    def _fit_history(self):
        # drop whole turns from the front until the context fits unchanged
        while len(self.history) > 1 and self.gen.context_truncated(tuple(self.history)):
            self.history.pop(0)

    def respond(self, text):
        if self.history and self.history[-1].role == self.USER:
            self.history.pop()
        self.history.append(Turn(self.USER, text))
        self._fit_history()
        return self._reply()

    def _reply(self):
        ctx = tuple(self.history)
        cand = self.gen.sample(ctx, 1, self._next_seed(), self.steps, self.eta)[0]
        self.history.append(Turn(self.BOT, cand.text))
        return cand.text

    def more(self):
        """Re-sample the last reply from a fresh latent."""
        if not self.history or self.history[-1].role != self.BOT:
            raise ValueError("nothing to re-sample yet")
        self.history.pop()
        return self._reply()

    def reset(self):
        self.history = []


def run_chat(session, stdin, stdout):
    stdout.write("type a message; /more re-samples, /reset clears history, /quit exits\n")
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            session.reset()
            stdout.write("(history cleared)\n")
            continue
        try:
            reply = session.more() if line == "/more" else session.respond(line)
        except ValueError as exc:
            stdout.write(f"({exc})\n")
            continue
        stdout.write(f"bot: {reply}\n")
        stdout.flush()
    return 0


def cmd_chat(args):
    gen, _ = load_generator(args.checkpoint, args.vocab, beam=args.beam)
    return run_chat(ChatSession(gen, args.seed, args.steps, args.eta), sys.stdin, sys.stdout)


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="latentdialog", description="Latent-diffusion dialogue generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic one-to-many corpus and its oracle")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-contexts", type=int, default=100)
    s.add_argument("--k-valid", type=int, default=8)
    s.add_argument("--dev-draws", type=int, default=2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="override out_dir")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    def common(s, eta=True):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--vocab", help="default: vocab.txt next to the checkpoint")
        s.add_argument("--steps", type=int, default=10, help="denoising steps")
        if eta:
            s.add_argument("--eta", type=float, default=0.0)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--beam", type=int, default=5)
        s.add_argument("--out")

    s = sub.add_parser("sample", help="sample responses for one or more contexts")
    common(s)
    s.add_argument("--context", help="JSONL corpus or JSON list of turn lists")
    s.add_argument("--turns", nargs="+", help="inline turns, 'role:text' or plain text")
    s.add_argument("--n-samples", type=int, default=10)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="BLEU / Distinct (and oracle scores) on a corpus")
    common(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=("standard", "upper_bound", "synthetic"), default="standard")
    s.add_argument("--oracle", help="default: oracle.json next to the corpus")
    s.add_argument("--n-samples", type=int, default=10, help="samples per context in synthetic mode")
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time encode / denoise / decode per sample")
    common(s, eta=False)
    s.add_argument("--contexts", required=True)
    s.add_argument("--n-contexts", type=int, default=20)
    s.add_argument("step_counts", nargs="+", type=int)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("chat", help="interactive chat in the terminal")
    common(s)
    s.set_defaults(func=cmd_chat)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
