import json
import math
import re

import pytest

from tricrit_rg import cli


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_grid():
    assert cli.parse_grid("0.01") == [0.01]
    assert cli.parse_grid("0, 0.01,0.1") == [0.0, 0.01, 0.1]
    assert cli.parse_grid("geom:0.02:0.5:3") == pytest.approx([0.02, 0.01, 0.005])
    assert cli.parse_grid(0.5) == [0.5]
    with pytest.raises(cli.ConfigError):
        cli.parse_grid("geom:1:2")
    with pytest.raises(cli.ConfigError):
        cli.parse_grid("a,b")


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[run]\nn = 2\njdirect = 9\nm2 = 0,0.01\na0 = geom:0.02:0.5:2\nseed = 5\n")
    cfg = cli.load_config(str(p), {"seed": 9, "out": str(tmp_path)})
    assert (cfg.n, cfg.j_direct, cfg.seed) == (2, 9, 9)
    assert cfg.m2 == [0.0, 0.01] and cfg.a0 == pytest.approx([0.02, 0.01])
    assert cfg.cache


@pytest.mark.parametrize("text", ["[other]\nn = 1\n", "[run]\nbogus = 1\n", "[run]\nn = x\n"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(cli.ConfigError):
        cli.load_config(str(p), {})


def test_hash_stable_and_ignores_paths(tmp_path):
    a = cli.load_config(None, {"out": str(tmp_path / "a"), "cache": "/x"})
    b = cli.load_config(None, {"out": str(tmp_path / "b"), "cache": "/y"})
    c = cli.load_config(None, {"seed": 1})
    assert a.hash() == b.hash() != c.hash()
    assert len(a.hash()) == 16


@pytest.mark.parametrize("argv", [["flow", "--a0", "0.3"], ["flow", "--L", "1"], ["flow", "--m2", "-1"],
                                  ["flow", "--jdirect", "2"], ["polymer-mc", "--a", "-1"],
                                  ["verify", "--criterion", "11"]])
def test_config_exit_code(argv, capsys, tmp_path):
    code, _, err = _run(capsys, *argv, "--out", str(tmp_path))
    assert code == cli.EXIT_CONFIG
    assert "configuration error" in err


def test_numerical_exit_code(capsys, tmp_path, cache_dir):
    # five direct scales are too few for the splice to close
    code, _, err = _run(capsys, "flow", "--jdirect", "5", "--depth", "50", "--out", str(tmp_path),
                        "--cache", cache_dir)
    assert code == cli.EXIT_NUMERIC
    assert "numerical failure [covariance]" in err


def test_flow_report(capsys, tmp_path, cache_dir):
    code, out, _ = _run(capsys, "flow", "--depth", "2000", "--a0", "0.02", "--out", str(tmp_path),
                        "--cache", cache_dir)
    assert code == cli.EXIT_OK
    summary = json.loads(out.strip().splitlines()[-1])
    doc = json.loads(open(summary["report"]).read())
    assert doc["config_hash"] == summary["config_hash"]
    anchors = {r["anchor"] for r in doc["records"]}
    assert {"flow:g0-critical", "flow:nu0-critical", "flow:z0-critical"} <= anchors
    assert all(r["config_hash"] == doc["config_hash"] for r in doc["records"])
    assert (tmp_path / "flow_n1_m2_0_a0_0.02.csv").exists()


def test_decompose_warm_cache_is_idempotent(capsys, tmp_path, cache_dir):
    outs = []
    for k in range(2):
        code, _, _ = _run(capsys, "decompose", "--jdirect", "7", "--out", str(tmp_path / str(k)),
                          "--cache", cache_dir)
        assert code == cli.EXIT_OK
        outs.append((tmp_path / str(k) / "moments_m2_0.csv").read_text())
    assert outs[0] == outs[1]


def test_twopoint_reference_line(capsys, tmp_path, cache_dir):
    code, out, _ = _run(capsys, "twopoint", "--radii", "16,64", "--out", str(tmp_path), "--cache", cache_dir)
    assert code == cli.EXIT_OK
    doc = json.loads(open(json.loads(out.strip().splitlines()[-1])["report"]).read())
    ref = [r for r in doc["records"] if r["anchor"] == "two-point:reference-line"]
    assert ref and ref[0]["value"] == pytest.approx(1 / (4 * math.pi))
    assert all(c["passed"] for c in doc["checks"])


def test_polymer_free_check(capsys, tmp_path):
    code, _, _ = _run(capsys, "polymer-mc", "--side", "3", "--samples", "20000", "--x", "1,0,0",
                      "--out", str(tmp_path))
    assert code == cli.EXIT_OK
    assert (tmp_path / "polymer_estimate.json").exists()


def test_verify_filter(capsys, tmp_path, cache_dir):
    code, out, _ = _run(capsys, "verify", "--criterion", "3", "--criterion", "9", "--out", str(tmp_path),
                        "--cache", cache_dir)
    lines = [l for l in out.splitlines() if l.startswith("[")]
    assert [int(re.search(r"criterion\s+(\d+)", l).group(1)) for l in lines] == [3, 9]
    assert code == cli.EXIT_OK
    summary = json.loads((tmp_path / "acceptance_summary.json").read_text())
    assert [s["id"] for s in summary] == [3, 9]
