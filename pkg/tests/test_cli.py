import json
import subprocess
import sys

import pytest

from rdn.checkpoint import load_checkpoint
from rdn.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from rdn.data import read_dataset, record_to_json
from rdn.evaluation import DESK_TRAIN
from rdn.inference import greedy_decode
from rdn.training import poly_decay_lr

SMALL = {
    "data": {"n_val": 10, "n_test": 10},
    "train": {"embed_dim": 6, "hidden": 8, "att_dim": 5, "batch_size": 10, "vocab_min_count": 1},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    data = root / "data"
    assert run("gen-data", "--config", cfg, "--out", data, "--count", 40, "--seed", 1) == EXIT_OK
    ck = root / "ck"
    assert run("train", "--config", cfg, "--data", data, "--variant", "full", "--out", ck, "--iters", 20) == EXIT_OK
    return root, cfg, data, ck


# ---------------------------------------------------------------- gen-data


def test_gen_data_counts_and_bytes(workdir, tmp_path, capsys):
    _, cfg, data, _ = workdir
    assert len((data / "train.jsonl").read_text().splitlines()) == 40
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "again", "--count", 40, "--seed", 1) == EXIT_OK
    assert "train\t40" in capsys.readouterr().out
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
        assert (data / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_gen_data_default_count(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--count", 200) == EXIT_OK
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 200


def test_gen_data_splits_disjoint(workdir):
    _, _, data, _ = workdir
    keys = {n: {r.scene.key() for r in read_dataset(data / f"{n}.jsonl")} for n in ("train", "val", "test")}
    assert not keys["train"] & keys["val"] and not keys["train"] & keys["test"] and not keys["val"] & keys["test"]


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--out", blocker / "sub", "--count", 5) == EXIT_CONFIG


# ------------------------------------------------------------------- train


def test_train_log_has_one_line_per_iteration(workdir):
    _, _, _, ck = workdir
    lines = (ck / "train.log").read_text().splitlines()
    assert [int(l.split("\t")[0]) for l in lines] == list(range(20))


def test_train_baseline_completes(workdir, tmp_path):
    _, cfg, data, _ = workdir
    assert run("train", "--config", cfg, "--data", data, "--variant", "baseline", "--out", tmp_path, "--iters", 5) == 0
    assert load_checkpoint(tmp_path).params.variant == "baseline"
    assert len((tmp_path / "train.log").read_text().splitlines()) == 5


def test_train_same_seed_bit_identical(workdir, tmp_path):
    _, cfg, data, ck = workdir
    assert run("train", "--config", cfg, "--data", data, "--variant", "full", "--out", tmp_path, "--iters", 20) == 0
    for f in ("params.bin", "manifest.json", "train.log"):
        assert (tmp_path / f).read_bytes() == (ck / f).read_bytes()


def test_resume_continues_schedule(workdir, tmp_path):
    _, cfg, data, ck = workdir
    part = tmp_path / "part"
    assert run("train", "--config", cfg, "--data", data, "--variant", "full", "--out", part,
               "--iters", 20, "--stop-at", 8) == 0
    assert run("train", "--config", cfg, "--data", data, "--out", part, "--resume", part) == 0
    lines = (part / "train.log").read_text().splitlines()
    it8 = lines[8].split("\t")
    assert int(it8[0]) == 8 and float(it8[1]) == poly_decay_lr(DESK_TRAIN["lr0"], 8, 20)
    assert (part / "params.bin").read_bytes() == (ck / "params.bin").read_bytes()
    assert (part / "train.log").read_bytes() == (ck / "train.log").read_bytes()


def test_invalid_variant_is_usage_error(workdir, tmp_path):
    _, _, data, _ = workdir
    with pytest.raises(SystemExit) as info:
        run("train", "--data", data, "--variant", "giant", "--out", tmp_path)
    assert info.value.code == EXIT_CONFIG


def test_bad_config_values_exit_2(workdir, tmp_path):
    _, _, data, _ = workdir
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr0": -1}}))
    assert run("train", "--config", bad, "--data", data, "--out", tmp_path / "o") == EXIT_CONFIG
    bad.write_text(json.dumps({"train": {"nonsense": 1}}))
    assert run("train", "--config", bad, "--data", data, "--out", tmp_path / "o") == EXIT_CONFIG
    bad.write_text("[1, 2]")
    assert run("train", "--config", bad, "--data", data, "--out", tmp_path / "o") == EXIT_CONFIG


def test_effective_config_is_echoed(workdir, tmp_path, capsys):
    _, cfg, data, _ = workdir
    run("train", "--config", cfg, "--data", data, "--out", tmp_path, "--iters", 2, "--lr", 0.25)
    echoed = json.loads(capsys.readouterr().err.splitlines()[0])["train"]
    assert echoed["lr0"] == 0.25 and echoed["hidden"] == 8 and echoed["total_iters"] == 2


def test_diverging_training_exits_3(workdir, tmp_path):
    _, cfg, data, _ = workdir
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path, "--iters", 20, "--lr", 1e200) == EXIT_NUMERIC


# ----------------------------------------------------------------- caption


def test_caption_is_deterministic(workdir, tmp_path, capsys):
    _, _, data, ck = workdir
    records = data / "test.jsonl"
    assert run("caption", "--checkpoint", ck, "--record", records) == 0
    first = capsys.readouterr().out
    assert run("caption", "--checkpoint", ck, "--record", records) == 0
    assert capsys.readouterr().out == first
    assert len(first.splitlines()) == 10


def test_caption_beam_one_equals_greedy(workdir, capsys):
    _, _, data, ck = workdir
    recs = read_dataset(data / "test.jsonl")
    model = load_checkpoint(ck)
    for rec in recs[:4]:
        assert run("caption", "--checkpoint", ck, "--record", record_to_json(rec), "--beam", 1) == 0
        ids, _ = greedy_decode(model.params, rec.regions, 20)
        assert capsys.readouterr().out.strip() == " ".join(model.vocab.decode(ids))


def test_caption_trace_json_schema(workdir, tmp_path):
    _, _, data, ck = workdir
    out = tmp_path / "trace.json"
    assert run("caption", "--checkpoint", ck, "--record", data / "test.jsonl", "--trace", out) == 0
    trace = json.loads(out.read_text())
    assert trace["steps"]
    for i, s in enumerate(trace["steps"], start=1):
        assert set(s) == {"t", "token", "alpha_vis", "alpha_ref", "pos_pred"}
        assert s["t"] == i and len(s["alpha_ref"]) == i
        assert abs(sum(s["alpha_ref"]) - 1) <= 1e-10 and abs(sum(s["alpha_vis"]) - 1) <= 1e-10
        assert isinstance(s["token"], str) and 0 <= s["pos_pred"] <= 1


def test_caption_trace_dot(workdir, tmp_path):
    _, _, data, ck = workdir
    out = tmp_path / "trace.dot"
    assert run("caption", "--checkpoint", ck, "--record", data / "test.jsonl", "--trace", out) == 0
    assert out.read_text().startswith("digraph")


def test_caption_vocab_mismatch_exits_2(workdir, tmp_path):
    _, _, data, ck = workdir
    other = tmp_path / "vocab.json"
    other.write_text(json.dumps(["<pad>", "<bos>", "<eos>", "<unk>", "zebra"]))
    assert run("caption", "--checkpoint", ck, "--record", data / "test.jsonl", "--vocab", other) == EXIT_CONFIG


def test_caption_missing_checkpoint_exits_2(workdir, tmp_path):
    _, _, data, _ = workdir
    assert run("caption", "--checkpoint", tmp_path / "none", "--record", data / "test.jsonl") == EXIT_CONFIG


# -------------------------------------------------------------------- eval


def test_eval_report_fields_in_range_and_deterministic(workdir, capsys):
    _, _, data, ck = workdir
    assert run("eval", "--checkpoint", ck, "--data", data, "--beam", 2) == 0
    first = capsys.readouterr().out
    assert run("eval", "--checkpoint", ck, "--data", data, "--beam", 2) == 0
    assert capsys.readouterr().out == first
    rep = json.loads(first)
    for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL"):
        assert 0 <= rep[k] <= 1
    assert 0 <= rep["cider"] <= 10 and rep["n"] == 10


def test_eval_oracle_scores_one(workdir, capsys):
    _, _, data, ck = workdir
    assert run("eval", "--checkpoint", ck, "--data", data, "--oracle") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["bleu4"] == 1.0 and rep["rougeL"] == 1.0


def test_eval_fingerprint_mismatch_exits_2(workdir, tmp_path):
    _, _, data, ck = workdir
    other = tmp_path / "d"
    other.mkdir()
    (other / "test.jsonl").write_bytes((data / "test.jsonl").read_bytes())
    (other / "vocab.json").write_text(json.dumps(["<pad>", "<bos>", "<eos>", "<unk>", "zebra"]))
    assert run("eval", "--checkpoint", ck, "--data", other) == EXIT_CONFIG


def test_eval_empty_split_exits_2(workdir, tmp_path):
    _, _, _, ck = workdir
    (tmp_path / "test.jsonl").write_text("")
    assert run("eval", "--checkpoint", ck, "--data", tmp_path) == EXIT_CONFIG


# --------------------------------------------------------------- gradcheck


def test_gradcheck_default_passes_and_repeats(capsys):
    assert run("gradcheck", "--dims", "tiny", "--seed", 0) == EXIT_OK
    first = capsys.readouterr().out
    assert float(first.split("\t")[1]) <= 1e-4
    assert run("gradcheck", "--dims", "tiny", "--seed", 0) == EXIT_OK
    assert capsys.readouterr().out == first


def test_gradcheck_corrupted_gradient_exits_1(capsys):
    assert run("gradcheck", "--seed", 0, "--corrupt-grad") == EXIT_CHECK
    assert "lstm2.w_hh" in capsys.readouterr().err


def test_gradcheck_unknown_dims_exits_2():
    assert run("gradcheck", "--dims", "huge") == EXIT_CONFIG


def test_console_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "rdn.cli", "gradcheck", "--dims", "huge"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and "error" in proc.stderr


def test_decode_config_precedence(workdir, tmp_path, capsys):
    _, _, data, ck = workdir
    rec = data / "test.jsonl"
    cfg = tmp_path / "decode.json"
    cfg.write_text(json.dumps({"decode": {"beam_size": 1, "max_len": 3}}))
    assert run("caption", "--checkpoint", ck, "--record", rec, "--config", cfg) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.err.splitlines()[0]) == {"decode": {"beam_size": 1, "max_len": 3}}
    assert all(len(line.split()) <= 3 for line in captured.out.splitlines())
    assert run("caption", "--checkpoint", ck, "--record", rec, "--config", cfg, "--max-len", 6, "--beam", 2) == 0
    assert json.loads(capsys.readouterr().err.splitlines()[0]) == {"decode": {"beam_size": 2, "max_len": 6}}


def test_bad_beam_exits_2(workdir):
    _, _, data, ck = workdir
    assert run("caption", "--checkpoint", ck, "--record", data / "test.jsonl", "--beam", 0) == EXIT_CONFIG
    assert run("eval", "--checkpoint", ck, "--data", data, "--max-len", 0) == EXIT_CONFIG
