"""Command-line interface: payload contracts, exit codes, file outputs."""

import csv
import io
import json
import os

import numpy as np
import pytest

import lightnl.cli as cli
import lightnl.gradcheck
import lightnl.tensor as T


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(out)


SMALL_SEARCH_CFG = {
    "data": {"kind": "longrange", "count": 256, "eval_count": 128, "size": 16},
    "epochs": 1,
    "batch_size": 64,
    "lr": 0.05,
}


@pytest.fixture
def search_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL_SEARCH_CFG))
    return str(path)


# -- verification commands -------------------------------------------------------

def test_grad_check_ok(capsys):
    code, doc = run_cli(capsys, "grad-check", "--seed", "0")
    assert code == 0 and doc["status"] == "ok"
    entries = doc["payload"]["max_rel_errors"]
    assert {"matmul", "depthwise_conv3x3", "lightnl_block",
            "expected_cost"} <= set(entries)
    assert all(v < 1e-4 for v in entries.values())


def test_grad_check_fails_with_injected_wrong_backward(capsys, monkeypatch):
    original = T.relu6

    def broken_relu6(x):
        def bw(dy):
            T._accumulate(x, dy)  # wrong: ignores the clamp mask
        return T._result(np.minimum(np.maximum(x.data, 0.0), 6.0), (x,), bw)

    monkeypatch.setattr(T, "relu6", broken_relu6)
    code, doc = run_cli(capsys, "grad-check", "--seed", "0")
    assert code == 1 and doc["status"] == "fail"


def test_nl_equiv_ok_and_deterministic(capsys):
    code, doc = run_cli(capsys, "nl-equiv", "--seed", "0")
    assert code == 0 and doc["status"] == "ok"
    code2, doc2 = run_cli(capsys, "nl-equiv", "--seed", "0")
    assert doc == doc2


# -- flops-report ------------------------------------------------------------------

def test_flops_report_ladder(capsys):
    code, doc = run_cli(capsys, "flops-report")
    assert code == 0
    ladder = [row["madds"] for row in doc["payload"]["ladder"]]
    assert ladder == sorted(ladder, reverse=True)
    assert 250 <= doc["payload"]["ratio_full_naive_over_lightnl"] <= 700


def test_flops_report_csv_matches_json(capsys, tmp_path):
    jpath, cpath = str(tmp_path / "r.json"), str(tmp_path / "r.csv")
    run_cli(capsys, "flops-report", "--out", jpath, "--format", "json")
    run_cli(capsys, "flops-report", "--out", cpath, "--format", "csv")
    jdoc = json.load(open(jpath))
    with open(cpath) as f:
        rows = list(csv.DictReader(f))
    csv_totals = {r["variant"]: int(r["madds"]) for r in rows}
    json_totals = {r["variant"]: r["madds"] for r in jdoc["ladder"]}
    assert csv_totals == json_totals


def test_flops_report_missing_arch_file_fails(capsys):
    code, doc = run_cli(capsys, "flops-report", "--arch", "/nonexistent.json")
    assert code == 1 and doc["status"] == "fail"


# -- search / derive ------------------------------------------------------------------

def test_search_writes_arch_and_history(capsys, tmp_path, search_cfg):
    out = str(tmp_path / "run")
    code, doc = run_cli(capsys, "search", "--seed", "1", "--config", search_cfg,
                        "--out", out)
    assert code == 0
    arch = json.load(open(doc["payload"]["arch_file"]))
    assert arch["schema"] == 1 and len(arch["locations"]) == 5
    with open(doc["payload"]["history_file"]) as f:
        rows = list(csv.DictReader(f))
    assert rows and set(rows[0]) == {"epoch", "split", "loss", "top1",
                                     "flops_expected"}


def test_search_same_seed_byte_identical(capsys, tmp_path, search_cfg):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        run_cli(capsys, "search", "--seed", "3", "--config", search_cfg,
                "--out", out)
        outs.append(out)
    for fname in ("arch.json", "history.csv", "search_state.json"):
        a = open(os.path.join(outs[0], fname), "rb").read()
        b = open(os.path.join(outs[1], fname), "rb").read()
        assert a == b, fname


def test_derive_matches_search_output(capsys, tmp_path, search_cfg):
    out = str(tmp_path / "run")
    _, doc = run_cli(capsys, "search", "--seed", "2", "--config", search_cfg,
                     "--out", out)
    derived = str(tmp_path / "arch2.json")
    code, _ = run_cli(capsys, "derive", "--state", doc["payload"]["state_file"],
                      "--out", derived)
    assert code == 0
    assert open(derived).read() == open(doc["payload"]["arch_file"]).read()


def test_derive_rejects_unpopulated_state(capsys, tmp_path):
    state = {
        "cset": {"channel_ratios": [0.125, 0.25], "spatial_strides": [2, 1]},
        "locations": [{"site": 0, "wd_norm_sq": 1.0, "t_insert": 0.0,
                       "t_channel": 0.0, "t_spatial": 0.0,
                       "ema_channel": None, "ema_spatial": None}],
    }
    path = tmp_path / "state.json"
    path.write_text(json.dumps(state))
    code, doc = run_cli(capsys, "derive", "--state", str(path))
    assert code == 1 and "EMA" in doc["payload"]["error"]


def test_flops_report_for_searched_arch(capsys, tmp_path, search_cfg):
    out = str(tmp_path / "run")
    _, doc = run_cli(capsys, "search", "--seed", "1", "--config", search_cfg,
                     "--out", out)
    code, rep = run_cli(capsys, "flops-report", "--arch",
                        doc["payload"]["arch_file"])
    assert code == 0
    assert rep["payload"]["total"] == doc["payload"]["derived_flops"]


# -- train / eval ---------------------------------------------------------------------

def test_train_plain_and_eval_round_trip(capsys, tmp_path, search_cfg):
    out = str(tmp_path / "t")
    code, doc = run_cli(capsys, "train", "--arch", "plain", "--seed", "1",
                        "--config", search_cfg, "--out", out)
    assert code == 0
    final = doc["payload"]["final"]
    code, ev = run_cli(capsys, "eval", "--arch", "plain", "--seed", "1",
                       "--config", search_cfg, "--checkpoint",
                       doc["payload"]["checkpoint"])
    assert code == 0
    assert ev["payload"]["top1"] == final["top1"]
    assert ev["payload"]["ce"] == pytest.approx(final["loss"], rel=1e-12)


def test_train_lightnl_step0_equals_plain(capsys, tmp_path, search_cfg):
    # with zero-initialized depthwise kernels the manual variant evaluates
    # exactly like the plain network before any training
    zero_cfg = dict(SMALL_SEARCH_CFG, epochs=0)
    path = tmp_path / "cfg0.json"
    path.write_text(json.dumps(zero_cfg))
    _, plain = run_cli(capsys, "eval", "--arch", "plain", "--seed", "5",
                       "--config", str(path))
    _, manual = run_cli(capsys, "eval", "--arch", "manual", "--seed", "5",
                        "--config", str(path))
    assert plain["payload"] == manual["payload"]


def test_train_realized_arch_from_file(capsys, tmp_path, search_cfg):
    out = str(tmp_path / "run")
    _, doc = run_cli(capsys, "search", "--seed", "1", "--config", search_cfg,
                     "--out", out)
    code, tdoc = run_cli(capsys, "train", "--arch", doc["payload"]["arch_file"],
                         "--seed", "1", "--config", search_cfg)
    assert code == 0
    assert tdoc["payload"]["flops"] == doc["payload"]["derived_flops"]


def test_train_determinism_byte_identical_csv(capsys, tmp_path, search_cfg):
    csvs = []
    for name in ("x", "y"):
        out = str(tmp_path / name)
        run_cli(capsys, "train", "--arch", "plain", "--seed", "7",
                "--config", search_cfg, "--out", out)
        csvs.append(open(os.path.join(out, "history.csv"), "rb").read())
    assert csvs[0] == csvs[1]


def test_unknown_dataset_kind_fails_cleanly(capsys, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"data": {"kind": "bogus"}}))
    code, doc = run_cli(capsys, "train", "--config", str(path))
    assert code == 1 and doc["status"] == "fail"
