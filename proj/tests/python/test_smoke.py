import json

import pytest

import quietread as qr


def test_encode_decode_round_trip():
    data = bytes(range(256))
    ids = qr.encode(data)
    assert ids == list(range(256))
    assert qr.decode(ids) == data
    assert qr.VOCAB_SIZE == 259 and qr.BOS == 256


def test_pack_and_mask_k2():
    packed = qr.pack(["abcd"], 8)
    assert packed["tokens"][0] == [qr.BOS, 97, 98, 99, 100, qr.EOS, qr.PAD, qr.PAD]
    assert qr.loss_mask(["abcd"], 8, 2) == [[0, 0, 1, 1, 1, 0, 0, 0]]
    assert qr.loss_mask(["a", "c"], 8, 1) == [[0, 1, 0, 0, 1, 0, 0, 0]]
    assert qr.render_mask("abcd", 8, 2) == "^abcd$\n··###·\n"


def test_mask_stats_fraction():
    docs = ["q" * 9] * 4
    stats = qr.mask_stats(docs, 11, 3)
    assert stats["readq_fraction"] == pytest.approx(0.3)
    assert stats["masked_in_per_row"] == [7, 7, 7, 7]


def test_k_must_fit_in_row():
    with pytest.raises(qr.ConfigError):
        qr.loss_mask(["abc"], 8, 8)


def test_synth_is_deterministic():
    docs, tasks = qr.synth_kv(3, 5)
    again, _ = qr.synth_kv(3, 5)
    assert docs == again and len(tasks) == 5
    for doc, task in zip(docs, tasks):
        assert doc == task["prompt"] + task["choices"][task["answer_index"]]
    rev = qr.synth_reverse(1, 4, 8, 12)
    for d in rev:
        left, right = d.split("|")
        assert left[::-1] == right


def test_cli_train_and_eval(tmp_path):
    cfg = {
        "name": "py",
        "model": {"d_model": 16, "n_layers": 2, "n_heads": 2},
        "train": {"total_steps": 3, "batch_size": 2, "seq_len": 64, "readq": {"enabled": True, "k": 4}},
        "data": {"synth": {"kind": "kv", "seed": 0, "n_docs": 8}},
        "eval": {"synth": {"kind": "kv", "seed": 1, "n_docs": 4}},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert qr.resolved_config(path)["train"]["readq"]["k"] == 4
    qr.cli("train", "--config", path, "--out", tmp_path / "run")
    assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 3
    qr.cli("eval", "--run", tmp_path / "run", "--step", 3)
    report = json.loads((tmp_path / "run" / "reports" / "eval_step_3.json").read_text())
    assert report["perplexity"]["ppl"] > 1
    code, _, err = qr.run_cli(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
    assert code == 4 and err
