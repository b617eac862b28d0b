import json
import math

import numpy as np
import pytest

from verse.cli import main


def test_gen_filter_caption(tmp_path, capsys):
    out = tmp_path / "traj"
    assert main(["gen-data", "--seed", "3", "--frames", "20", "--out", str(out),
                 "--width", "16", "--height", "12"]) == 0
    assert (out / "manifest.json").exists()
    ret = main(["filter", "--in", str(out), "--rot-deg", "90", "--move", "0.5"])
    text = capsys.readouterr().out
    assert "accept" in text or "reject" in text
    main(["caption", "--in", str(out)])
    caption = capsys.readouterr().out.strip()
    assert caption  # template grammar words only
    from verse.dataset import tokenize

    tokenize(caption)


def test_train_and_rollout(tmp_path, capsys):
    data = tmp_path / "traj"
    main(["gen-data", "--seed", "5", "--frames", "80", "--out", str(data),
          "--width", "16", "--height", "12"])
    ckpt = tmp_path / "m.dvrs"
    assert main(["train", "--data", str(data), "--steps", "3", "--ckpt", str(ckpt),
                 "--clips", "2", "--layers", "1", "--dim", "32", "--heads", "2"]) == 0
    assert ckpt.exists()
    actions = [{"kind": "forward", "magnitude": 0.2} for _ in range(16)]
    actions_file = tmp_path / "actions.json"
    actions_file.write_text(json.dumps(actions))
    out = tmp_path / "roll"
    assert main(["rollout", "--ckpt", str(ckpt), "--scene-seed", "5",
                 "--actions", str(actions_file), "--windows", "2",
                 "--out", str(out), "--width", "16", "--height", "12",
                 "--sampler-steps", "1"]) == 0
    assert (out / "drift.txt").exists()
    assert (out / "trajectory" / "frames.bin").exists()


def test_oracle_rollout(tmp_path):
    actions = [{"kind": "forward", "magnitude": 0.25} for _ in range(40)]
    actions_file = tmp_path / "actions.json"
    actions_file.write_text(json.dumps(actions))
    out = tmp_path / "roll"
    assert main(["rollout", "--oracle", "--scene-seed", "2",
                 "--actions", str(actions_file), "--windows", "1",
                 "--out", str(out), "--width", "16", "--height", "12"]) == 0
    report = json.loads((out / "drift.json").read_text())
    # teacher forcing: zero drift at every horizon
    for row in report["rows"]:
        assert row["translation_err"] < 1e-6
