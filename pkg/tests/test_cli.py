import io
import json
import os

import jsonschema
import pytest

from latentdialog import cli
from latentdialog.corpus import Turn, load_jsonl
from latentdialog.metrics import EVAL_REPORT_SCHEMA
from latentdialog.model import DialogModel

TINY = dict(d_model=16, n_heads=2, d_ff=32, enc_layers=1, dec_layers=1, den_layers=1, time_dim=16, T=100,
            max_ctx=48, max_resp=12, batch_size=16, eval_every=10, steps=20, lr=1e-3, vocab_size=300)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--n-contexts", "25", "--k-valid", "4"]) == 0
    cfg = dict(TINY, train_corpus=str(data / "train.jsonl"), dev_corpus=str(data / "dev.jsonl"),
               out_dir=str(root / "run"))
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return root


def test_synth_outputs(run):
    data = run / "data"
    assert len(load_jsonl(str(data / "train.jsonl"))) == 25
    assert len(load_jsonl(str(data / "dev.jsonl"))) == 50
    oracle = json.loads((data / "oracle.json").read_text())
    assert len(oracle["valid"]) == 25 and all(len(v) == 4 for v in oracle["valid"].values())


def test_train_writes_artifacts_and_manifest(run):
    out = run / "run"
    for name in ("best.ckpt", "last.ckpt", "train_log.jsonl", "vocab.txt", "manifest.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and man["config"]["d_model"] == 16
    assert len(man["sha256"]["best_checkpoint"]) == 64
    assert sum(1 for _ in open(out / "train_log.jsonl")) == 20


def test_train_rerun_reproduces_log(run, tmp_path):
    cfg = json.loads((run / "tiny.json").read_text())
    cfg["out_dir"] = str(tmp_path / "again")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p)]) == 0

    def losses(path):
        return [{k: v for k, v in json.loads(x).items() if k != "ms"} for x in open(path)]

    assert losses(tmp_path / "again" / "train_log.jsonl") == losses(run / "run" / "train_log.jsonl")


def test_train_config_errors(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(dict(TINY, schedule_s=0.0, train_corpus="nope.jsonl", dev_corpus="nope.jsonl")))
    assert cli.main(["train", "--config", str(p)]) == 2
    assert "schedule_s" in capsys.readouterr().err
    p.write_text(json.dumps(dict(TINY, train_corpus="nope.jsonl", dev_corpus="nope.jsonl")))
    assert cli.main(["train", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "train_corpus" in err and "dev_corpus" in err


def test_sample_is_reproducible_and_encodes_once(run, tmp_path, monkeypatch):
    ckpt = str(run / "run" / "best.ckpt")
    outs = []
    calls = []
    real = DialogModel.encode_context

    def counted(self, batch):
        calls.append(1)
        return real(self, batch)

    monkeypatch.setattr(DialogModel, "encode_context", counted)
    for i in range(2):
        out = tmp_path / f"s{i}.jsonl"
        assert cli.main(["sample", "--checkpoint", ckpt, "--turns", "hello", "how is jazz", "--n-samples", "10",
                         "--out", str(out)]) == 0
        outs.append([json.loads(x) for x in open(out)])
    assert calls == [1, 1]
    assert outs[0] == outs[1]
    assert [r["seed"] for r in outs[0]] == list(range(10))
    assert (tmp_path / "s0.jsonl.manifest.json").exists()
    assert cli.main(["sample", "--checkpoint", ckpt, "--turns", "hello", "--steps", "50", "--n-samples", "2"]) == 0


def test_sample_reports_truncation(run, capsys):
    ckpt = str(run / "run" / "best.ckpt")
    long = " ".join(["word"] * 200)
    assert cli.main(["sample", "--checkpoint", ckpt, "--turns", long, "--n-samples", "1"]) == 0
    assert "context limit" in capsys.readouterr().err


def test_sample_needs_a_context(run):
    assert cli.main(["sample", "--checkpoint", str(run / "run" / "best.ckpt")]) == 2


def test_parse_turns():
    assert cli.parse_turns(["a", "b", "c"]) == (Turn(1, "a"), Turn(0, "b"), Turn(1, "c"))
    assert cli.parse_turns(["0:hi", "1:yo"]) == (Turn(0, "hi"), Turn(1, "yo"))


def test_eval_modes(run, tmp_path, capsys):
    ckpt = str(run / "run" / "best.ckpt")
    corpus = str(run / "data" / "train.jsonl")
    scores = {}
    for mode in ("standard", "upper_bound", "synthetic"):
        out = tmp_path / f"{mode}.json"
        assert cli.main(["eval", "--checkpoint", ckpt, "--corpus", corpus, "--mode", mode, "--limit", "8",
                         "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        jsonschema.validate(rep, EVAL_REPORT_SCHEMA)
        scores[mode] = rep
    assert scores["upper_bound"]["bleu1"] >= scores["standard"]["bleu1"]
    assert scores["synthetic"]["validity"] is not None
    printed = capsys.readouterr().out
    assert printed.index("bleu1") < printed.index("distinct2")


def test_eval_synthetic_without_oracle(run, tmp_path):
    lone = tmp_path / "corpus.jsonl"
    lone.write_text((run / "data" / "train.jsonl").read_text())
    assert cli.main(["eval", "--checkpoint", str(run / "run" / "best.ckpt"), "--corpus", str(lone),
                     "--mode", "synthetic"]) == 2


def test_bench_rows_sorted(run, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--checkpoint", str(run / "run" / "best.ckpt"), "--contexts",
                     str(run / "data" / "train.jsonl"), "--n-contexts", "3", "20", "5", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert [r["steps"] for r in rows] == [5, 20]
    assert all(r["n_contexts"] == 3 and r["denoise"] > 0 for r in rows)


def test_chat_session(run):
    gen, _ = cli.load_generator(str(run / "run" / "best.ckpt"))
    session = cli.ChatSession(gen, seed=3)
    with pytest.raises(ValueError):
        session.more()
    first = session.respond("hi there")
    assert [t.role for t in session.history] == [1, 0]
    session.respond("what about jazz")
    roles = [t.role for t in session.history]
    assert roles == [1, 0, 1, 0]
    seeds_before = session.draws
    session.more()
    assert session.draws == seeds_before + 1 and len(session.history) == 4
    session.reset()
    assert session.history == []
    assert isinstance(first, str)


def test_chat_drops_oldest_turns(run):
    gen, _ = cli.load_generator(str(run / "run" / "best.ckpt"))
    session = cli.ChatSession(gen)
    for i in range(12):
        session.respond(f"turn {i} " + "blah " * 6)
    assert not gen.context_truncated(tuple(session.history[:-1]))
    roles = [t.role for t in session.history]
    assert all(a != b for a, b in zip(roles, roles[1:]))


def test_chat_repl(run):
    gen, _ = cli.load_generator(str(run / "run" / "best.ckpt"))
    out = io.StringIO()
    cli.run_chat(cli.ChatSession(gen), io.StringIO("/more\nhello\n/more\n/reset\nhi\n/quit\nnever\n"), out)
    text = out.getvalue()
    assert text.count("bot:") == 3
    assert "nothing to re-sample" in text and "history cleared" in text


def test_missing_checkpoint(tmp_path):
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "none.ckpt"), "--turns", "hi"]) == 2


@pytest.mark.parametrize("name", ["synthetic_tiny.json", "dialogue_small.json"])
def test_shipped_configs_load(name):
    from latentdialog.config import RunConfig
    path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", name)
    cfg = RunConfig.load(path)
    assert cfg.steps <= 5000 and cfg.warmup < cfg.steps
