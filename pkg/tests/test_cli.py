import subprocess
import sys

import numpy as np
import pytest

from tripse import config as C
from tripse.cli import main

SMALL = ["--widths=4,8,8,8", "--image-size=16", "--synth-classes=3", "--synth-per-class=8",
         "--synth-eval-per-class=2", "--batch-size=8", "--kernel-size=3"]


def train(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["train", f"--output-dir={out}", *SMALL, *extra])
    return code, out


def last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["--help"]) == 0


def test_train_writes_metrics_and_checkpoints(tmp_path, capsys):
    code, out = train(tmp_path, "run", "--epochs=5", "--checkpoint-every=2")
    assert code == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,train_acc,val_acc,lr,seconds"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    assert sorted(p.name for p in out.glob("*.tsew")) == ["epoch_002.tsew", "epoch_004.tsew", "last.tsew"]
    assert last_line(capsys).startswith("best_val_acc=")


def test_overrides_reach_resolved_config(tmp_path):
    code, out = train(tmp_path, "run", "--epochs=1", "--attention=tripse4", "--se-ratio", "1")
    assert code == 0
    resolved = C.parse_config_text((out / "config.resolved.txt").read_text())
    assert resolved["attention"] == "tripse4" and resolved["se_ratio"] == 1 and resolved["epochs"] == 1


def test_config_file_then_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 4\nattention = se\n")
    out = tmp_path / "run"
    assert main(["train", f"--config={cfg}", f"--output-dir={out}", *SMALL, "--epochs=1"]) == 0
    resolved = C.parse_config_text((out / "config.resolved.txt").read_text())
    assert resolved["epochs"] == 1 and resolved["attention"] == "se"


def test_reruns_are_byte_identical(tmp_path):
    a = train(tmp_path, "a", "--epochs=2", "--attention=tripse1")[1]
    b = train(tmp_path, "b", "--epochs=2", "--attention=tripse1")[1]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "last.tsew").read_bytes() == (b / "last.tsew").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    full = train(tmp_path, "full", "--epochs=3", "--attention=ta")[1]
    part = train(tmp_path, "part", "--epochs=2", "--attention=ta")[1]
    assert main(["train", f"--output-dir={part}", *SMALL, "--epochs=3", "--attention=ta",
                 f"--resume={part / 'last.tsew'}"]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert (full / "last.tsew").read_bytes() == (part / "last.tsew").read_bytes()


def test_eval_reproduces_final_val_acc(tmp_path, capsys):
    _, out = train(tmp_path, "run", "--epochs=2", "--attention=tripse2")
    final = (out / "metrics.csv").read_text().splitlines()[-1].split(",")[3]
    capsys.readouterr()
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}"]) == 0
    line = last_line(capsys)
    assert line == f"accuracy={final} n=6"


def test_eval_on_other_split(tmp_path, capsys):
    _, out = train(tmp_path, "run", "--epochs=1")
    capsys.readouterr()
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}", "--split=Training"]) == 0
    assert last_line(capsys).endswith("n=24")


def test_eval_fingerprint_mismatch_exits_4(tmp_path):
    _, out = train(tmp_path, "run", "--epochs=1", "--attention=tripse4")
    other = tmp_path / "other.cfg"
    other.write_text((out / "config.resolved.txt").read_text().replace("attention = tripse4", "attention = ta"))
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}", f"--config={other}"]) == 4
    assert main(["eval", f"--checkpoint={tmp_path / 'missing.tsew'}", f"--config={other}"]) == 4


def test_bad_config_exits_2(tmp_path):
    assert main(["train", f"--output-dir={tmp_path}", "--epochs=abc"]) == 2
    assert main(["train", f"--output-dir={tmp_path}", "--no-such-key=1"]) == 2
    assert main(["train", f"--output-dir={tmp_path}", "--widths=4,4,4"]) == 2
    assert main(["train", f"--output-dir={tmp_path}", "--scheduler=cosine"]) == 2
    assert main(["eval", f"--checkpoint={tmp_path / 'x.tsew'}"]) == 2  # no resolved config beside it


def fer_fixture(path, usages):
    rng = np.random.default_rng(0)
    lines = ["emotion,pixels,Usage"]
    for i, usage in enumerate(usages):
        lines.append(f"{i % 7},{' '.join(map(str, rng.integers(0, 256, 2304)))},{usage}")
    path.write_text("\n".join(lines) + "\n")


def test_fer_empty_split_exits_3(tmp_path, capsys):
    csv = tmp_path / "fer.csv"
    fer_fixture(csv, ["Training"] * 8 + ["PublicTest"] * 2)
    out = tmp_path / "run"
    assert main(["train", f"--output-dir={out}", "--dataset=fer2013", f"--fer-csv={csv}", "--widths=4,8,8,8",
                 "--image-size=16", "--epochs=1", "--batch-size=4", "--kernel-size=3"]) == 0
    capsys.readouterr()
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}"]) == 0
    assert last_line(capsys).endswith("n=2")
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}", "--split=PrivateTest"]) == 3


def test_fer_missing_or_malformed_exits_3(tmp_path):
    assert main(["train", f"--output-dir={tmp_path / 'a'}", "--dataset=fer2013",
                 f"--fer-csv={tmp_path / 'nope.csv'}"]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("emotion,pixels,Usage\n0,1 2 3,Training\n")
    assert main(["train", f"--output-dir={tmp_path / 'b'}", "--dataset=fer2013", f"--fer-csv={bad}"]) == 3


@pytest.mark.parametrize("variant", ["se", "ta", "tripse1", "tripse2", "tripse3", "tripse4"])
def test_gradcheck_passes(variant, capsys):
    assert main(["gradcheck", f"--variant={variant}"]) == 0
    assert last_line(capsys).endswith("PASS")


def test_gradcheck_backbone(capsys):
    assert main(["gradcheck", "--variant=backbone", "--shape=1,1,8,8", "--attention=tripse4"]) == 0


def test_gradcheck_detects_corrupted_backward(capsys):
    assert main(["gradcheck", "--variant=tripse1", "--corrupt-backward"]) == 1
    assert last_line(capsys).endswith("FAIL")


def test_gradcheck_bad_shape():
    assert main(["gradcheck", "--shape=1,4,5"]) == 2


@pytest.mark.parametrize("variant,total,millions", [
    ("tripse1", 100_650, "0.1M"),
    ("se", 99_450, "0.1M"),
    ("ta", 1_200, "0.0M"),
    ("none", 0, "0.0M"),
])
def test_params_totals(variant, total, millions, capsys):
    assert main(["params", f"--variant={variant}"]) == 0
    assert last_line(capsys) == f"total={total} ({millions})"


def test_params_per_stage_lines(capsys):
    assert main(["params", "--variant=tripse4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    stages = [ln for ln in lines if ln.startswith("stage")]
    assert len(stages) == 4
    assert stages[3].startswith("stage4 C=768 H=7 W=7")


def test_bench_runs(capsys):
    assert main(["bench", "--variant=ta,tripse1", "--shape=2,8,6,6", "--iters=1", "--kernel=3",
                 "--backend=both"]) == 0
    out = capsys.readouterr().out
    assert "variant=tripse1" in out and "overhead tripse1 vs ta" in out
    assert main(["bench", "--iters=0"]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tripse", "params", "--variant=se"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.strip().splitlines()[-1] == "total=99450 (0.1M)"


def test_sample_cap_applies_to_every_split(tmp_path, capsys):
    _, out = train(tmp_path, "run", "--epochs=1", "--max-samples-per-split=5")
    capsys.readouterr()
    assert main(["eval", f"--checkpoint={out / 'last.tsew'}", "--split=Training"]) == 0
    assert last_line(capsys).endswith("n=5")


def test_gradcheck_se_is_tight(capsys):
    assert main(["gradcheck", "--variant=se"]) == 0
    errs = [float(ln.split("max_rel_err=")[1].split()[0]) for ln in capsys.readouterr().out.splitlines()]
    assert max(errs) < 1e-6
