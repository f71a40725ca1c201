import json
import subprocess
import sys

import pytest

from emso import checkpoint
from emso.cli import main, rank_records

from conftest import TINY

TINY_SETS = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("train-base", "--out-dir", d, *TINY_SETS) == 0
    assert run("memorize", "--base", d / "base.ckpt", "--out-dir", d) == 0
    return d


def read(path):
    return json.loads(path.read_text())


def test_memorized_checkpoint_carries_config_and_lineage(chain):
    _, meta = checkpoint.load(chain / "memorized.ckpt")
    assert meta["experiment"]["n_forget"] == TINY["n_forget"]
    assert [s["step"] for s in meta["lineage"]] == ["train-base", "memorize"]
    assert set(meta["seeds"]) >= {"split", "init", "train", "memorize"}


def test_erase_then_evaluate_lowers_ma(chain, capsys):
    assert run("erase", "--ckpt", chain / "memorized.ckpt", "--method", "emso", "--k", 2, "--out-dir", chain) == 0
    erased = read(chain / "emso.report.json")
    assert erased["method"] == "EMSO" and len(erased["mask"]) == 2
    assert run("evaluate", "--ckpt", chain / "memorized.ckpt", "--out-dir", chain) == 0
    assert run("evaluate", "--ckpt", chain / "emso.ckpt", "--reference", chain / "memorized.ckpt", "--out-dir", chain) == 0
    before, after = read(chain / "memorized.report.json"), read(chain / "emso.report.json")
    assert after["ma"] < before["ma"]
    assert after["ppl_ratio"] == pytest.approx(after["ppl"] / before["ppl"])
    log = [json.loads(l) for l in (chain / "emso.log.jsonl").read_text().splitlines()]
    assert log[0]["kind"] == "start" and log[-1]["kind"] == "final"


def test_zero_epochs_copies_parameters(chain):
    assert run("erase", "--ckpt", chain / "memorized.ckpt", "--epochs", 0, "--tau", "inf", "--name", "noop", "--out-dir", chain) == 0
    src, _ = checkpoint.load(chain / "memorized.ckpt")
    out, meta = checkpoint.load(chain / "noop.ckpt")
    assert checkpoint.params_hash(src) == checkpoint.params_hash(out)
    header = checkpoint._HEADER.size
    n_src = checkpoint._HEADER.unpack_from((chain / "memorized.ckpt").read_bytes())[2]
    n_out = checkpoint._HEADER.unpack_from((chain / "noop.ckpt").read_bytes())[2]
    assert (chain / "memorized.ckpt").read_bytes()[header + n_src:] == (chain / "noop.ckpt").read_bytes()[header + n_out:]
    assert meta["lineage"][-1]["epochs_run"] == 0


def test_sweep_k_writes_one_report_per_value(chain):
    d = chain / "sweep"
    assert run("sweep-k", "--ckpt", chain / "memorized.ckpt", "--values", "1,2,3,4", "--epochs", 1, "--out-dir", d) == 0
    reports = sorted(d.glob("*.report.json"))
    assert [p.name for p in reports] == [f"k{k}.report.json" for k in (1, 2, 3, 4)]
    assert [len(read(p)["mask"]) for p in reports] == [1, 2, 3, 4]


def test_select_prints_mask(chain, capsys):
    assert run("select", "--ckpt", chain / "memorized.ckpt", "--k", 3, "--out-dir", chain / "sel") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(out["selected"]) == 3
    lines = (chain / "sel" / "selection.jsonl").read_text().splitlines()
    assert len(lines) == 36 and sum(json.loads(l)["selected"] for l in lines) == 3


def test_attn_dump(chain):
    d = chain / "attn"
    assert run("attn-dump", "--ckpt", chain / "memorized.ckpt", "--layer", 1, "--head", 2, "--out-dir", d) == 0
    dump = read(d / "attn-L1H2-forget0.json")
    T = len(dump["tokens"])
    assert len(dump["pattern"]) == T and all(len(r) == T for r in dump["pattern"])
    assert all(abs(sum(r) - 1) < 1e-5 for r in dump["pattern"])
    assert (d / "attn-L1H2-forget0.csv").read_text().count("\n") == T
    assert run("attn-dump", "--ckpt", chain / "memorized.ckpt", "--layer", 0, "--head", 0, "--text", "hello", "--out-dir", d) == 0
    assert run("attn-dump", "--ckpt", chain / "memorized.ckpt", "--layer", 5, "--head", 0, "--out-dir", d) == 1


def test_manifest_fields(chain):
    m = read(chain / "manifest-erase-emso.json")
    assert {"command", "argv", "config", "config_hash", "seeds", "inputs", "outputs"} <= set(m)
    assert m["inputs"]["ckpt"]["sha256"] == checkpoint.file_hash(chain / "memorized.ckpt")
    for path, digest in m["outputs"].items():
        if path.endswith(".ckpt"):
            assert checkpoint.file_hash(path) == digest


def test_reference_methods_via_cli(chain):
    d = chain / "ref"
    assert run("erase", "--ckpt", chain / "memorized.ckpt", "--method", "TA", "--out-dir", d) == 0
    assert run("erase", "--ckpt", chain / "memorized.ckpt", "--method", "CD", "--memo", d / "memo.ckpt", "--out-dir", d) == 0
    _, meta = checkpoint.load(d / "cd.ckpt")
    assert meta["decoding"]["gamma"] == 0.3
    assert run("evaluate", "--ckpt", d / "cd.ckpt", "--out-dir", d) == 0
    rep = read(d / "cd.report.json")
    assert 0.0 <= rep["ma"] <= 1.0 and rep["checkpoint"].endswith("cd.ckpt")


def test_report_excludes_collapsed_rows(tmp_path, capsys):
    rows = [
        {"name": "a", "ma": 0.1, "ppl_ratio": 1.01, "collapse": None},
        {"name": "ga", "ma": 0.0, "ppl_ratio": 40.0, "collapse": "gibberish"},
        {"name": "b", "ma": 0.4, "ppl_ratio": 1.0, "collapse": None},
    ]
    for r in rows:
        (tmp_path / f"{r['name']}.report.json").write_text(json.dumps(r))
    out = tmp_path / "out"
    assert run("report", tmp_path, "--out-dir", out) == 0
    table = (out / "table.md").read_text()
    ga_line = next(l for l in table.splitlines() if l.startswith("| ga "))
    assert ga_line.endswith("| gibberish | - |")
    ranked = {r["name"]: r["rank"] for r in rank_records(rows)}
    assert ranked == {"a": 1, "ga": None, "b": 2}
    assert (out / "tradeoff.csv").read_text().splitlines()[0] == "name,ma,el_3,ppl_ratio,rep_2,collapse"


def test_errors_give_nonzero_exit(tmp_path, capsys):
    assert run("erase", "--bogus") == 2
    assert run("erase", "--ckpt", tmp_path / "nope.ckpt") == 1
    assert "no checkpoint" in capsys.readouterr().err
    assert run("train-base", "--set", "n_forget=-3", "--out-dir", tmp_path) == 1
    assert run("train-base", "--set", "no_such_key=1", "--out-dir", tmp_path) == 1
    assert run("train-base", "--set", "erase.tau=0.5", "--out-dir", tmp_path) == 1
    assert run("train-base", "--config", tmp_path / "missing.json") == 1
    assert run("report", tmp_path / "none.report.json") == 1
    assert not list(tmp_path.glob("*.ckpt"))


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "base_epochs": 1, "erase": {"k": 3}}))
    assert run("train-base", "--config", cfg, "--set", "model.d_ff=128", "--seed", 7, "--out-dir", tmp_path) == 0
    _, meta = checkpoint.load(tmp_path / "base.ckpt")
    exp = meta["experiment"]
    assert exp["base_epochs"] == 1 and exp["erase"]["k"] == 3 and exp["model"]["d_ff"] == 128 and exp["seed"] == 7
    assert meta["config"]["d_ff"] == 128


def test_make_corpus_and_console_entry(tmp_path):
    out = tmp_path / "c.txt"
    assert run("make-corpus", "--lines", 25, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 25
    proc = subprocess.run([sys.executable, "-m", "emso.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep-k" in proc.stdout


def test_file_corpus_round_trip(tmp_path):
    corpus = tmp_path / "c.txt"
    assert run("make-corpus", "--lines", 300, "--out", corpus) == 0
    sets = [a for k, v in {**TINY, "base_epochs": 1}.items() if k != "synthetic_lines" for a in ("--set", f"{k}={v}")]
    assert run("train-base", "--set", f"corpus={corpus}", *sets, "--out-dir", tmp_path) == 0
    m = read(tmp_path / "manifest-train-base.json")
    assert m["inputs"]["corpus"] == str(corpus) and len(m["inputs"]["corpus_sha256"]) == 64
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff\xfe not utf8\n")
    assert run("train-base", "--set", f"corpus={bad}", "--out-dir", tmp_path / "x") == 1
