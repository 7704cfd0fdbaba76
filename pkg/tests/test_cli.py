import csv
import io
import json

import pytest

from layerquant import planner
from layerquant.cli import main, parse_bits, parse_size
from layerquant.corpus import CorpusSpec, build_batches
from layerquant.importance import ImportanceReport
from layerquant.model import apply_plan, load_model, perplexity, save_model


@pytest.fixture
def model_path(tiny_model, tmp_path):
    p = tmp_path / "tiny.safetensors"
    save_model(tiny_model, p)
    return p


@pytest.fixture
def report32(tmp_path):
    scores = [((i * 7) % 32) / 32 for i in range(32)]
    p = tmp_path / "r32.json"
    p.write_text(ImportanceReport.from_scores(32, lim=scores, zd=scores[::-1]).to_json())
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def corpus_flags(d):
    return ["--corpus", d, "--seq-len", "32"]


def test_parse_helpers():
    assert parse_size("20GB") == 20e9
    assert parse_size("1.5MiB") == 1.5 * 2**20
    assert parse_size("4096") == 4096
    assert parse_bits("4,2") == (4, 2)


def test_score(capsys, model_path, text_dir, tmp_path):
    code, out, _ = run(capsys, "score", model_path, "--scores", "zd")
    assert code == 0 and json.loads(out)["calibration_fingerprint"] == ""
    code, _, err = run(capsys, "score", model_path)
    assert code == 2 and "corpus" in err
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(capsys, "score", model_path, *corpus_flags(text_dir), "--out", a, "--csv", tmp_path / "s.csv")
    run(capsys, "score", model_path, *corpus_flags(text_dir), "--out", b)
    assert a.read_bytes() == b.read_bytes()
    rep = ImportanceReport.from_json(a.read_text())
    assert len(rep.lim) == len(rep.zd) == 4
    assert (tmp_path / "s.csv").read_text().startswith("layer,lim,zd\n")


def test_corrupt_model_names_offset(capsys, model_path, tmp_path):
    raw = bytearray(model_path.read_bytes())
    raw[:8] = (len(raw) * 2).to_bytes(8, "little")
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "score", bad, "--scores", "zd")
    assert code == 2 and "offset" in err
    code, _, err = run(capsys, "score", tmp_path / "missing.safetensors", "--scores", "zd")
    assert code == 2


def test_plan_modes(capsys, report32):
    code, out, _ = run(capsys, "plan", report32, "--budget", "20GB", "--m-lower", "17GB", "--m-higher", "34GB")
    assert code == 0 and json.loads(out)["n_higher"] == 5
    _, out, _ = run(capsys, "plan", report32, "--n-low", 10, "--bits", "4,2")
    plan = json.loads(out)
    assert plan["avg_bits"] == 3.375 and plan["bits_per_layer"].count(2) == 10
    _, out, _ = run(capsys, "plan", report32, "--three-level", 4)
    assert json.loads(out)["avg_bits"] == 4.0
    _, out, _ = run(capsys, "plan", report32, "--prune", 2, "--prune-mode", "sequential_top")
    assert json.loads(out)["pruned_layers"] == [29, 30]
    _, out, _ = run(capsys, "plan", report32, "--outlier", 3, "--ordering", "zd")
    assert sorted(set(json.loads(out)["outlier_fraction_per_layer"])) == [0.001, 0.01]
    _, a, _ = run(capsys, "plan", report32, "--n-low", 7, "--ordering", "random", "--seed", 3)
    _, b, _ = run(capsys, "plan", report32, "--n-low", 7, "--ordering", "random", "--seed", 3)
    assert a == b


def test_plan_usage_errors(capsys, report32):
    with pytest.raises(SystemExit) as e:
        main(["plan", str(report32), "--n-low", "3", "--prune", "2"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["plan", str(report32)])
    assert e.value.code == 2
    code, _, err = run(capsys, "plan", report32, "--budget", "20GB")
    assert code == 2 and "--m-lower" in err
    code, _, _ = run(capsys, "plan", report32, "--n-low", 40)
    assert code == 2


def test_quantize_and_eval(capsys, model_path, tiny_model, text_dir, tmp_path):
    rep = ImportanceReport.from_scores(4, lim=[0.4, 0.1, 0.3, 0.2])
    (tmp_path / "r.json").write_text(rep.to_json())
    plan_path = tmp_path / "plan.json"
    run(capsys, "plan", tmp_path / "r.json", "--n-low", 2, "--group-size", 32, "--out", plan_path)
    q = tmp_path / "q.safetensors"
    code, out, _ = run(capsys, "quantize", model_path, plan_path, q)
    assert code == 0
    acct = json.loads(out)
    plan = planner.QuantPlan.from_json(plan_path.read_text())
    assert (acct["idealized_bytes"], acct["exact_bytes"]) == planner.plan_memory(plan, tiny_model)

    flags = corpus_flags(text_dir)
    _, out_q, _ = run(capsys, "eval", q, *flags)
    _, out_fake, _ = run(capsys, "eval", model_path, "--plan", plan_path, *flags)
    _, again, _ = run(capsys, "eval", model_path, "--plan", plan_path, *flags)
    assert json.loads(out_q)["perplexity"] == json.loads(out_fake)["perplexity"]
    assert json.loads(out_fake)["perplexity"] == json.loads(again)["perplexity"]
    seqs = build_batches(CorpusSpec.from_dir(text_dir, seq_len=32, stride=32)).sequences
    direct = perplexity(apply_plan(tiny_model, plan), seqs)
    assert json.loads(out_q)["perplexity"] == direct

    _, out, _ = run(capsys, "eval", q, *flags, "--baseline", model_path)
    r = json.loads(out)
    assert set(r) == {"ordering", "avg_bits", "n_low_layers", "perplexity", "baseline_perplexity",
                      "retention", "runtime_seconds", "n_tokens"}
    assert 0 < r["retention"] <= 1


def test_sixteen_bit_quantize_is_identity(capsys, model_path, tiny_model, text_dir, tmp_path):
    plan = planner.pruning_plan([0, 1, 2, 3], 0, base_bits=16)
    p = tmp_path / "p16.json"
    p.write_text(plan.to_json())
    q = tmp_path / "q16.safetensors"
    assert run(capsys, "quantize", model_path, p, q)[0] == 0
    assert load_model(q).weights.equals(tiny_model.weights)
    _, a, _ = run(capsys, "eval", model_path, *corpus_flags(text_dir))
    _, b, _ = run(capsys, "eval", model_path, "--plan", p, *corpus_flags(text_dir))
    assert json.loads(a)["perplexity"] == json.loads(b)["perplexity"]


def test_quantize_mismatch(capsys, model_path, tmp_path):
    p = tmp_path / "p.json"
    p.write_text(planner.two_level_plan(list(range(6)), 3).to_json())
    assert run(capsys, "quantize", model_path, p, tmp_path / "o.safetensors")[0] == 2


def test_eval_empty_corpus(capsys, model_path, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "eval", model_path, "--corpus", tmp_path / "empty")[0] == 2


def test_sweep_cli(capsys, model_path, text_dir, tmp_path):
    out = tmp_path / "sweep.csv"
    ret = tmp_path / "ret.json"
    code, _, _ = run(capsys, "sweep", model_path, *corpus_flags(text_dir), "--seeds", 2, "--out", out,
                     "--retention-out", ret)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert list(rows[0]) == ["ordering", "n_low", "avg_bits", "idealized_bytes", "exact_bytes", "perplexity", "stddev"]
    assert len(rows) == 4 * 5
    assert {r["ordering"] for r in rows} == {"lim", "zd", "reverse_lim", "random"}
    for k in (0, 4):
        assert len({r["perplexity"] for r in rows if int(r["n_low"]) == k}) == 1
    assert set(json.loads(ret.read_text())) == {"lim", "zd", "reverse_lim", "random"}


def test_compare_prune_cli(capsys, model_path, text_dir):
    code, out, _ = run(capsys, "compare-prune", model_path, *corpus_flags(text_dir), "--bits", "4,2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 3 * 3
    for k in range(3):
        inc = [r for r in rows if int(r["increment"]) == k]
        assert len({r["idealized_bytes"] for r in inc}) == 1
    assert len({r["perplexity"] for r in rows if r["increment"] == "0"}) == 1
    code, _, _ = run(capsys, "compare-prune", model_path, *corpus_flags(text_dir), "--bits", "4,3")
    assert code == 2


def test_numeric_failure_exit_code(capsys, model_path, text_dir, monkeypatch):
    from layerquant import harness

    def boom(*a, **k):
        raise harness.NumericFailure("perplexity is not finite")

    monkeypatch.setattr(harness, "evaluate", boom)
    code, _, err = run(capsys, "eval", model_path, *corpus_flags(text_dir))
    assert code == 3 and "not finite" in err
