import json
import subprocess
import sys

import pytest

from shapediff.cli import main


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-data -> pretrain -> finetune artifacts shared by the read-only tests."""
    root = tmp_path_factory.mktemp("chain")
    (root / "pre.cfg").write_text("steps=2\nbatch=2\nseed=1\n")
    (root / "ft.cfg").write_text("steps=2\nbatch=2\nseed=2\n")
    assert main(["gen-data", "--task", "pretrain", "--count", "6",
                 "--test-count", "2", "--seed", "0",
                 "--out", str(root / "data")]) == 0
    assert main(["gen-data", "--task", "abstraction", "--count", "6",
                 "--test-count", "3", "--seed", "1",
                 "--out", str(root / "ftdata")]) == 0
    assert main(["pretrain", "--data", str(root / "data"),
                 "--config", str(root / "pre.cfg"),
                 "--out", str(root / "pre")]) == 0
    assert main(["finetune", "--task", "abstraction", "--variant", "spice",
                 "--pretrained", str(root / "pre" / "checkpoint.bin"),
                 "--data", str(root / "ftdata"),
                 "--config", str(root / "ft.cfg"),
                 "--out", str(root / "spice")]) == 0
    return root


def test_gen_data_reruns_byte_identical(tmp_path, capsys):
    args = ["gen-data", "--task", "editing", "--count", "4",
            "--test-count", "2", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.bin").read_bytes()
    b = (tmp_path / "b" / "dataset.bin").read_bytes()
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for key in ("command", "config", "seeds", "inputs", "outputs",
                "version", "wall_clock_s"):
        assert key in manifest
    assert manifest["seeds"]["dataset"] == 7


def test_out_collision_refused_unless_forced(tmp_path, capsys):
    args = ["gen-data", "--task", "pretrain", "--count", "2",
            "--test-count", "1", "--out", str(tmp_path / "d")]
    assert main(args) == 0
    code, _, err = _run(capsys, *args)
    assert code == 1
    assert err.count("\n") == 1 and "output exists" in err
    assert main(args + ["--force"]) == 0


def test_missing_inputs_and_bad_config_are_named(tmp_path, capsys):
    code, _, err = _run(capsys, "pretrain", "--data", str(tmp_path / "nope"),
                        "--out", str(tmp_path / "o"))
    assert code == 1 and "missing file" in err
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not a key value line\n")
    (tmp_path / "d").mkdir()
    code, _, err = _run(capsys, "pretrain", "--data", str(tmp_path / "d"),
                        "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 1 and "config parse" in err


def test_pretrain_rejects_downstream_config(chain, tmp_path, capsys):
    cfg = tmp_path / "wrong.cfg"
    cfg.write_text("task=editing\nvariant=spice\nsteps=1\n")
    code, _, err = _run(capsys, "pretrain", "--data", str(chain / "data"),
                        "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 1 and "task/variant mismatch" in err


def test_finetune_rejects_sampling_policy_variant(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "finetune", "--task", "abstraction",
                        "--variant", "sdedit3d",
                        "--pretrained", str(chain / "pre" / "checkpoint.bin"),
                        "--data", str(chain / "ftdata"),
                        "--out", str(tmp_path / "o"))
    assert code == 1 and "task/variant mismatch" in err


def test_sample_writes_exports_and_manifest(chain, tmp_path, capsys):
    out = tmp_path / "samp"
    code, _, _ = _run(capsys, "sample",
                      "--checkpoint", str(chain / "spice" / "checkpoint.bin"),
                      "--guidance", f"{chain / 'ftdata'}:0",
                      "--transform", "abstract", "--steps", "2",
                      "--out", str(out))
    assert code == 0
    ply = (out / "output.ply").read_text().splitlines()
    assert ply[0] == "ply" and "element vertex 1024" in ply[2]
    assert (out / "guidance.ply").exists()
    assert json.loads((out / "manifest.json").read_text())["config"]["steps"] == 2


def test_sample_step_budget_checked(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "sample",
                        "--checkpoint", str(chain / "spice" / "checkpoint.bin"),
                        "--guidance", f"{chain / 'ftdata'}:0",
                        "--steps", "200", "--out", str(tmp_path / "o"))
    assert code == 1
    assert "steps exceed schedule" in err and err.count("\n") == 1


def test_sample_conditional_needs_guidance(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "sample",
                        "--checkpoint", str(chain / "spice" / "checkpoint.bin"),
                        "--prompt", "a red chair", "--steps", "2",
                        "--out", str(tmp_path / "o"))
    assert code == 1 and "task/variant mismatch" in err


def test_sample_guidance_forms(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "sample",
                        "--checkpoint", str(chain / "pre" / "checkpoint.bin"),
                        "--guidance", f"{chain / 'ftdata'}:99",
                        "--steps", "2", "--out", str(tmp_path / "o"))
    assert code == 1 and "invalid input" in err
    spec = tmp_path / "spec.json"
    spec.write_text('{"category": "table", "levels": {"top_roundness": 1}}')
    code, _, _ = _run(capsys, "sample",
                      "--checkpoint", str(chain / "pre" / "checkpoint.bin"),
                      "--guidance", str(spec), "--steps", "2",
                      "--export", "obj", "--out", str(tmp_path / "o2"))
    assert code == 0
    assert (tmp_path / "o2" / "output.obj").read_text().splitlines()[1].startswith("v ")


def test_eval_writes_report_and_rejects_bad_tokens(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--checkpoints", "spice",
                        "--data", str(chain / "ftdata"),
                        "--task", "abstraction", "--out", str(tmp_path / "r.csv"))
    assert code == 1 and "task/variant mismatch" in err
    code, out, _ = _run(capsys, "eval", "--checkpoints",
                        f"spice={chain / 'spice' / 'checkpoint.bin'}",
                        f"shap_e_ft={chain / 'pre' / 'checkpoint.bin'}",
                        "--data", str(chain / "ftdata"),
                        "--task", "abstraction", "--steps", "2",
                        "--out", str(tmp_path / "r.csv"))
    assert code == 0
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header.startswith("variant,item,category,gd")
    assert (tmp_path / "r-summary.txt").exists()
    assert (tmp_path / "manifest.json").exists()
    assert "variants by mean GD" in out


def test_ablate_validates_variant_list(chain, tmp_path, capsys):
    code, _, err = _run(capsys, "ablate",
                        "--pretrained", str(chain / "pre" / "checkpoint.bin"),
                        "--data", str(chain / "ftdata"),
                        "--variants", "spice,warp9",
                        "--out", str(tmp_path / "o"))
    assert code == 1 and "unknown variants" in err
    code, _, err = _run(capsys, "ablate",
                        "--pretrained", str(chain / "pre" / "checkpoint.bin"),
                        "--data", str(chain / "ftdata"),
                        "--variants", "sdedit3d",
                        "--out", str(tmp_path / "o"))
    assert code == 1 and "shap_e_ft" in err


def test_ablate_trains_and_reports_subset(chain, tmp_path, capsys):
    out = tmp_path / "abl"
    code, _, _ = _run(capsys, "ablate",
                      "--pretrained", str(chain / "pre" / "checkpoint.bin"),
                      "--data", str(chain / "ftdata"),
                      "--variants", "spice,shap_e_ft,sdedit3d",
                      "--config", str(chain / "ft.cfg"),
                      "--steps", "2", "--out", str(out))
    assert code == 0
    assert (out / "report.csv").exists() and (out / "summary.txt").exists()
    assert (out / "spice" / "checkpoint.bin").exists()
    assert (out / "sdedit3d" / "variant.json").exists()
    assert not (out / "sdedit3d" / "checkpoint.bin").exists()
    for sub in ("spice", "shap_e_ft", "sdedit3d"):
        assert (out / sub / "manifest.json").exists()


def test_report_charts_deterministic(chain, tmp_path, capsys):
    csv = tmp_path / "r.csv"
    assert main(["eval", "--checkpoints",
                 f"spice={chain / 'spice' / 'checkpoint.bin'}",
                 "--data", str(chain / "ftdata"), "--task", "abstraction",
                 "--steps", "2", "--out", str(csv)]) == 0
    capsys.readouterr()
    assert main(["report", "--in", str(csv), "--out", str(tmp_path / "p1")]) == 0
    assert main(["report", "--in", str(csv), "--out", str(tmp_path / "p2")]) == 0
    capsys.readouterr()
    svg1 = (tmp_path / "p1" / "gd.svg").read_text()
    assert svg1 == (tmp_path / "p2" / "gd.svg").read_text()
    assert svg1.startswith("<svg ") and "spice" in svg1
    assert (tmp_path / "p1" / "summary.txt").exists()

    empty = tmp_path / "empty.csv"
    empty.write_text("variant,item,category,gd\n")
    code, _, err = _run(capsys, "report", "--in", str(empty),
                        "--out", str(tmp_path / "p3"))
    assert code == 1 and "no per-variant mean rows" in err


def test_console_entry_point_and_thread_env(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "shapediff.cli", "gen-data", "--task", "pretrain",
         "--count", "2", "--test-count", "1", "--out", str(tmp_path / "d")],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "SHAPEDIFF_THREADS": "1"},
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "d" / "dataset.bin").exists()


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--task", "no-such-task", "--count", "1", "--out", "x"])
    assert exc.value.code == 2
