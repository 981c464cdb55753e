import os
import subprocess
import sys

import pytest

from minibox import cli, state

from .cli_suite import FIRETHORN, invoke, run_suite


def test_run_ivoatex_make_writes_outputs_as_1000(tmp_path):
    st = tmp_path / "st"
    code, out = invoke(st, ["run", "--env", "useruid=1000", "--volume", "/work:/texdata",
                            "ivoa/ivoatex", "--", "make"])
    assert code == 0
    assert out.endswith("ivoatex-1\texited(0)\n")
    host = state.StateDir(str(st)).load().host
    made = sorted(n.path for n in host.files() if n.path.startswith("/work/"))
    assert made and all(host.get(p).uid == 1000 for p in made)
    assert {os.path.splitext(p)[1] for p in made} >= {".pdf", ".html"}


def test_compose_tunnel_starts_six_in_order(tmp_path):
    code, out = invoke(tmp_path / "st", ["compose", "-f", FIRETHORN, "run", "test-suite",
                                         "--profile", "tunnel"])
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines()]
    assert [r[0] for r in rows] == ["started"] * 6
    assert [r[1] for r in rows] == ["metadata", "results-db", "userdata", "ogsadai", "firethorn",
                                    "test-suite"]
    code, out = invoke(tmp_path / "st", ["compose", "-f", FIRETHORN, "run", "test-suite",
                                         "--profile", "tunnel"])
    assert [line.split("\t")[0] for line in out.splitlines()] == ["reused"] * 6


def test_rm_force_missing_is_not_found(tmp_path, capsys):
    code, _ = invoke(tmp_path / "st", ["rm", "--force", "nosuch"])
    assert code == 1
    assert "minibox: NotFound:" in capsys.readouterr().err


def test_scenario_nosuch(tmp_path, capsys):
    assert invoke(tmp_path / "st", ["scenario", "nosuch"])[0] == 1
    assert "UnknownScenario" in capsys.readouterr().err


def test_scenario_dedup_reports_sharing(tmp_path):
    code, out = invoke(tmp_path / "st", ["scenario", "dedup"])
    assert code == 0
    metrics = {f[1]: int(f[2]) for f in (line.split("\t") for line in out.splitlines())
               if f[0] == "metric" and f[2].isdigit()}
    assert metrics["unique_bytes"] < metrics["referenced_bytes"]
    assert out.splitlines()[-1] == "PASS scenario dedup"


def test_scenario_oom_leak(tmp_path):
    code, out = invoke(tmp_path / "st", ["scenario", "oom-leak"], porcelain=False)
    assert code == 0
    assert "FAIL" not in out


def test_scenario_figures(tmp_path):
    figs = tmp_path / "figs"
    code, out = invoke(tmp_path / "st", ["scenario", "ambassador-swap", "--figures", str(figs)])
    assert code == 0
    assert sorted(os.listdir(figs)) == ["ambassador-swap-checks.png", "ambassador-swap-latency.png"]
    for name in os.listdir(figs):
        with open(figs / name, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"


@pytest.mark.parametrize("argv", [
    [],
    ["nosuch"],
    ["run"],
    ["run", "--bogus", "debian:wheezy"],
    ["run", "--env", "novalue", "debian:wheezy"],
    ["ps", "--", "echo"],
    ["exec", "a"],
    ["compose", "-f", "x.yml"],
    ["run", "--volume", "relative:/x", "debian:wheezy"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert invoke(tmp_path / "st", argv)[0] == 2
    assert "error" in capsys.readouterr().err


def test_usage_error_names_flag(tmp_path, capsys):
    invoke(tmp_path / "st", ["run", "--bogus", "debian:wheezy"])
    assert "--bogus" in capsys.readouterr().err


def test_porcelain_vs_table(tmp_path):
    st = tmp_path / "st"
    invoke(st, ["run", "--detach", "--name", "a", "debian:wheezy"])
    _, porcelain = invoke(st, ["ps"])
    _, table = invoke(st, ["ps"], porcelain=False)
    assert porcelain.count("\t") == 3 and "ID" not in porcelain
    assert table.splitlines()[0].split() == ["ID", "NAME", "IMAGE", "STATUS"]
    assert porcelain.split("\t")[1:] == ["a", "debian:wheezy", "running\n"]


def test_images_lists_fixtures(tmp_path):
    _, out = invoke(tmp_path / "st", ["images"])
    refs = [line.split("\t")[0] for line in out.splitlines()]
    assert "debian:wheezy" in refs and "ivoa/ivoatex:latest" in refs
    assert refs == sorted(refs)


def test_exec_and_logs(tmp_path):
    st = tmp_path / "st"
    invoke(st, ["run", "--detach", "--name", "a", "debian:wheezy"])
    assert invoke(st, ["exec", "a", "--", "echo", "hello"]) == (0, "hello\n")
    assert invoke(st, ["exec", "a", "--", "false"])[0] == 1
    invoke(st, ["run", "--name", "b", "debian:wheezy", "--", "echo", "logged"])
    assert invoke(st, ["logs", "b"]) == (0, "logged\n")


def test_oom_is_reported(tmp_path):
    code, out = invoke(tmp_path / "st", ["run", "--memory", "100", "--name", "t", "debian:wheezy",
                                         "--", "echo", "z" * 300])
    assert code == 0
    assert "t\toom_killed" in out
    assert "OOM t usage=301 limit=100" in out


def test_export_import(tmp_path):
    st = tmp_path / "st"
    arc = tmp_path / "tex.tar"
    assert invoke(st, ["export", "ivoa/ivoatex", str(arc)])[0] == 0
    code, out = invoke(tmp_path / "other", ["import", str(arc)])
    assert code == 0 and out.startswith("ivoa/ivoatex:latest\t")


def test_state_command_matches_directory(tmp_path):
    st = tmp_path / "st"
    invoke(st, ["images"])
    assert invoke(st, ["state"])[1].strip() == state.StateDir(str(st)).digest()


def test_version_flag(capsys):
    assert cli.main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("minibox ")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "minibox", "--state", str(tmp_path / "st"),
                           "--porcelain", "rm", "nosuch"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.startswith("minibox: NotFound:")


def test_full_suite(tmp_path):
    work = tmp_path / "work"
    work.mkdir()
    problems, digest, events = run_suite(tmp_path / "st", work)
    assert problems == []
    assert b"scenario name=ambassador-swap result=PASS" in events
