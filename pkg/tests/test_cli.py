import json

import numpy as np
import pytest

from maskdiff import cli
from maskdiff.io import file_digest, load_tensor, save_tensor


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--scenario", "acquisition", "--n-images", "80", "--out", str(root / "corpus")]) == 0
    ckpt = root / "den.ckpt"
    args = ["train", "--task", "denoiser", "--corpus", str(root / "corpus"), "--epochs", "1", "--out", str(ckpt)]
    assert cli.main(args + ["--denoiser-width", "8"]) == 0
    return root


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    for command in cli.COMMANDS:
        with pytest.raises(SystemExit):
            parser.parse_args([command, "--help"])
        text = capsys.readouterr().out
        for flag in ("--config", "--scenario", "--seeds", "--method", "--inversion", "--cfg-weight", "--tau", "--steps", "--out"):
            assert flag in text


def test_flags_map_to_config_keys():
    props = set(cli.CONFIG_SCHEMA["properties"])
    for action in cli.build_parser()._subparsers._group_actions[0].choices["stress"]._actions:
        if action.dest not in ("help", "config"):
            assert action.dest in props


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"tau": 0.5, "cfg_weight": 3.0, "seeds": [4]}))
    args = cli.build_parser().parse_args(["stress", "--config", str(path), "--tau", "0.1", "--seeds", "2"])
    cfg = cli.resolve_config(args)
    assert cfg["tau"] == 0.1 and cfg["cfg_weight"] == 3.0 and cfg["seeds"] == [0, 1]
    assert cli.stress_config(cfg).tau == 0.1


def test_seed_lists():
    assert cli._seeds("3") == [0, 1, 2]
    assert cli._seeds("5,9") == [5, 9]


def test_exit_codes(tmp_path, workspace):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["stress", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("{not json")
    assert cli.main(["stress", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"cfg_weight": -1}))
    assert cli.main(["stress", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["stress", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_MISSING
    assert cli.main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ckpt")]) == cli.EXIT_MISSING
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["gen", "--n-images", "2", "--out", str(blocker / "sub")]) == cli.EXIT_UNWRITABLE
    codes = {cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_MISSING, cli.EXIT_VERIFY, cli.EXIT_UNWRITABLE}
    assert len(codes) == 5


def test_gen_round_trips_and_is_idempotent(tmp_path, workspace):
    out = tmp_path / "again"
    assert cli.main(["gen", "--scenario", "acquisition", "--n-images", "80", "--out", str(out)]) == 0
    for name in ("images.mdt", "index.json", "mask_disease.mdt"):
        assert file_digest(out / name) == file_digest(workspace / "corpus" / name)
    samples = cli.load_corpus(out)
    assert len(samples) == 80
    assert all(s.masks["disease"].any() == (s.label == 1) for s in samples)


def _edit_manifest(root, workspace, entries):
    x = load_tensor(workspace / "corpus" / "images.mdt")
    save_tensor(root / "src.mdt", x[0])
    (root / "req.json").write_text(json.dumps(entries))
    return root / "req.json"


def test_identity_edit_reproduces_the_input(tmp_path, workspace):
    manifest = _edit_manifest(
        tmp_path,
        workspace,
        [{"id": "same", "source": "src.mdt", "c_inv": "site_a", "c": "site_a", "m_keep": "all", "cfg_weight": 1.0}],
    )
    ckpt = workspace / "den.ckpt"
    args = ["edit", "--manifest", str(manifest), "--checkpoint", str(ckpt), "--corpus", str(workspace / "corpus")]
    assert cli.main(args + ["--out", str(tmp_path / "out")]) == 0
    assert file_digest(tmp_path / "out" / "same.mdt") == file_digest(tmp_path / "src.mdt")
    index = json.loads((tmp_path / "out" / "edits.json").read_text())
    (entry,) = index["edits"]
    assert entry["edited_digest"] == entry["source_digest"]
    assert entry["score"] is None and not entry["kept"]
    assert cli.main(args + ["--out", str(tmp_path / "out2")]) == 0
    assert file_digest(tmp_path / "out2" / "edits.json") == file_digest(tmp_path / "out" / "edits.json")


def test_edit_rejects_bad_requests(tmp_path, workspace):
    manifest = _edit_manifest(tmp_path, workspace, [{"id": "x", "source": "src.mdt", "c_inv": "site_a"}])
    args = ["edit", "--manifest", str(manifest), "--checkpoint", str(workspace / "den.ckpt"), "--out", str(tmp_path / "o")]
    assert cli.main(args) == cli.EXIT_CONFIG
    manifest = _edit_manifest(tmp_path, workspace, [{"id": "x", "source": "gone.mdt", "c_inv": "site_a", "c": "site_a"}])
    assert cli.main(args + ["--corpus", str(workspace / "corpus")]) == cli.EXIT_MISSING


def test_train_classifier(tmp_path, workspace):
    out = tmp_path / "cls.ckpt"
    args = ["train", "--task", "classifier", "--corpus", str(workspace / "corpus"), "--epochs", "1", "--out", str(out)]
    assert cli.main(args) == 0
    from maskdiff.predictors import load_predictor

    model = load_predictor(out)
    assert model.training_manifest_["task"] == "classifier"


def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)


def test_verify_failure_exit_code(monkeypatch):
    from maskdiff.verify import CheckResult

    monkeypatch.setattr(cli, "run_all", lambda: [CheckResult("x", False, "broken")])
    assert cli.main(["verify"]) == cli.EXIT_VERIFY


def test_thread_cap(monkeypatch):
    import torch

    before = torch.get_num_threads()
    monkeypatch.setenv("MASKDIFF_THREADS", "1")
    try:
        cli.main(["verify"])
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_stress_writes_reports(tmp_path):
    cfg = {
        "seeds": [0],
        "denoiser_width": 8,
        "denoiser_epochs": 1,
        "denoiser_train_size": 64,
        "predictor_epochs": 1,
        "train_size": 60,
        "test_size": 40,
        "edit_size": 4,
        "tau": -1.0,
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["stress", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert len(report["summary"]) == 4
    assert np.isfinite([s["mean"] for s in report["summary"]]).all()
