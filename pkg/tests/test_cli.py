import json

import pytest

from posspde import __version__
from posspde.cli import build_config, main, parse_config_file, parse_grid
from posspde.errors import ConfigurationError

SMALL = ["--h", "8", "--dt", "2^-2..2^-4", "--ref-dt", "2^-6", "--paths", "3", "--T", "0.5"]


def test_parse_grid():
    assert parse_grid("2^-4..2^-9") == [2.0**-k for k in range(4, 10)]
    assert parse_grid("2^-9..2^-7") == [2.0**-9, 2.0**-8, 2.0**-7]
    assert parse_grid("4..16") == [4.0, 8.0, 16.0]
    assert parse_grid("2^-2, 0.5,1/8") == [0.25, 0.5, 0.125]
    for bad in ("3..12", "2^-2..", "a", "1,,2", "1/0"):
        with pytest.raises(ConfigurationError):
            parse_grid(bad)


def test_build_config_defaults_and_invariants():
    cfg = build_config({"experiment": "converge-time"})
    assert cfg.ns == (32,) and cfg.ref_n == 32
    assert cfg.dts == tuple(2.0**-k for k in range(4, 10))
    assert cfg.ref_dt == 2.0**-12 and cfg.paths == 50 and cfg.lams == (3.0,)
    assert cfg.schemes == ("ema", "emi", "split2")
    space = build_config({"experiment": "converge-space"})
    assert space.ns == (4, 8, 16) and space.ref_n == 32 and space.ref_dt == 2.0**-12
    assert build_config({"experiment": "converge-time", "mesh.h": "2^-5"}).ns == (32,)
    bad = [
        {"time.dt": "0.3"},            # not dyadic in T
        {"time.dt": "3/8", "time.T": "0.75"},
        {"mesh.h": "12"},              # not a power of two
        {"paths": "0"},
        {"scheme.theta": "0.5"},
        {"scheme.id": "rk4"},
        {"noise.lambda": "1,2"},
        {"mesh.h": "8,16"},
        {"mesh.ref_h": "16"},
        {"mesh.dim": "3"},
    ]
    for extra in bad:
        with pytest.raises(ConfigurationError):
            build_config({"experiment": "converge-time", **extra})
    with pytest.raises(ConfigurationError):
        build_config({"experiment": "plot"})


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("# sweep\nexperiment = converge-time\nscheme.id = split2\n"
                    "paths = 7\nmesh.h = 8\ntime.dt = 2^-2..2^-4\ntime.ref_dt = 2^-6\n")
    assert parse_config_file(conf)["paths"] == "7"
    out = tmp_path / "o"
    assert main(["--config", str(conf), "--paths", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["paths"] == 2
    assert manifest["config"]["schemes"] == ["split2"]
    assert manifest["version"] == __version__ and manifest["seed"] == 0
    assert manifest["outputs"] == ["errors.csv", "rates.csv"]
    assert "wall_s" in manifest["timings"]


def test_malformed_config_exit_2(tmp_path, capsys):
    conf = tmp_path / "bad.cfg"
    conf.write_text("experiment converge-time\n")
    assert main(["--config", str(conf)]) == 2
    conf.write_text("colour = blue\n")
    assert main(["--config", str(conf)]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg")]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main(["converge-time", "--bogus"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["converge-time", "--dt", "0.3", "--out", str(tmp_path)]) == 2
    assert main(["converge-time", "--experiment", "validate"]) == 2
    assert main([]) == 2


def test_numerical_failure_exit_3(tmp_path):
    code = main(["converge-time", *SMALL, "--solver", "cg", "--max-iter", "1", "--tol", "1e-14",
                 "--out", str(tmp_path)])
    assert code == 3


def test_converge_time_outputs(tmp_path, capsys):
    assert main(["converge-time", *SMALL, "--scheme", "split2,emi", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert "split2" in printed and "slope" in printed
    rows = (tmp_path / "errors.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3
    assert rows[1].startswith("split2,time,0.125,0.25,3,")


def test_converge_space_and_census(tmp_path):
    out = tmp_path / "space"
    assert main(["converge-space", "--scheme", "sexp", "--h", "2^-1..2^-2", "--ref-h", "2^-3",
                 "--dt", "2^-5", "--paths", "2", "--T", "0.25", "--out", str(out)]) == 0
    assert (out / "rates.csv").exists()
    out = tmp_path / "census"
    assert main(["nonneg-census", "--scheme", "split2,ema", "--lambda", "2,4", "--h", "8",
                 "--dt", "2^-2..2^-3", "--T", "2", "--paths", "4", "--out", str(out)]) == 0
    lines = (out / "census.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 * 2
    assert lines[1] == "split2,2.0,0.125,0.25,4,4"


def test_single_path_with_cache(tmp_path):
    out, cache = tmp_path / "sp", tmp_path / "cache"
    args = ["single-path", "--h", "8", "--dt", "2^-4", "--T", "0.5", "--paths", "2",
            "--out", str(out), "--cache", str(cache)]
    assert main(args) == 0
    first = (out / "trajectory.csv").read_text()
    assert len(list(cache.iterdir())) == 2
    assert main(args) == 0
    assert (out / "trajectory.csv").read_text() == first
    assert first.splitlines()[0] == "path,t,min,max,norm_h"


def test_validate(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "posspde", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "converge-time" in res.stdout
