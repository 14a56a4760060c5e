import json

import numpy as np
import pytest

from deskmae import checkpoint as ckio
from deskmae.cli import main
from deskmae.data.manifest import read_jsonl


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A pretrained 3-band vit-micro checkpoint plus small labelled datasets."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {"recipe": "vit-micro", "data": {"n": 64, "size": 16, "bands": 3, "kind": "texture"},
           "batch_size": 16, "steps": 4, "seed": 1, "output_dir": str(root / "pre"), "run_id": "cli"}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(root / "cfg.json")]) == 0
    for name, kind, bands, seed in (("cls3", "classification", 3, 1), ("cls4", "classification", 4, 1),
                                    ("seg3", "segmentation", 3, 2), ("cls3b", "classification", 3, 7)):
        assert main(["datagen", "--kind", kind, "--n", "24", "--size", "16", "--bands", str(bands),
                     "--classes", "3", "--seed", str(seed), "--out", str(root / name)]) == 0
    return root


def test_calc_params(capsys):
    code, out, _ = run(capsys, "calc", "params", "--recipe", "vit-g")
    assert code == 0
    assert out.strip() == ("vit-g: 907,912,704 parameters (907.9M) -> 914M-class (-0.67% vs 914,000,000, "
                           "tolerance ±1.5%)")
    code, out, _ = run(capsys, "calc", "params", "--recipe", "vit-b", "--trainable-only", "--json")
    d = json.loads(out)
    assert d["params"] == 85_647_360 and d["within_tolerance"] is False


def test_calc_lr_and_budget(capsys):
    assert run(capsys, "calc", "lr", "--base", "1.5e-4", "--batch", "4096")[1].strip() == \
        "2.4e-3  (= 1.5e-4 x 4096/256)"
    d = json.loads(run(capsys, "calc", "lr", "--base", "1.5e-4", "--batch", "2048", "--json")[1])
    assert d["lr"] == 1.2e-3
    d = json.loads(run(capsys, "calc", "budget", "--n", "1000848", "--epochs", "200", "--json")[1])
    assert d["iterations_at_bs1"] == 200_169_600 and d["display"] == "200.2M"


def test_pretrain_outputs_and_resume(workspace, capsys):
    pre = workspace / "pre"
    assert {p.name for p in pre.iterdir()} >= {"config.json", "metrics.jsonl", "checkpoint.orkt", "final.orkt"}
    code, out, _ = run(capsys, "pretrain", "--config", workspace / "cfg.json", "--json")
    assert code == 0 and json.loads(out)["steps"] == 4  # already finished: resume is a no-op


def test_probe_and_eval(workspace, capsys, tmp_path):
    ck = workspace / "pre" / "final.orkt"
    code, out, _ = run(capsys, "probe", "--checkpoint", ck, "--train", workspace / "cls3", "--test",
                       workspace / "cls3b", "--out", tmp_path / "probe", "--epochs", "3", "--batch", "8", "--warmup",
                       "1", "--json")
    assert code == 0
    res = json.loads(out)
    assert res["steps"] == 9 and 0 <= res["top1"] <= 1
    recs = [json.loads(line) for line in (tmp_path / "probe" / "metrics.jsonl").read_text().splitlines()]
    assert recs[-2]["metric"] == "top1" and recs[-2]["value"] == res["top1"]
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "probe" / "final.orkt", "--data",
                       workspace / "cls3b", "--out", tmp_path / "e.npz")
    summary = json.loads(out)
    assert code == 0 and summary["top1"] == res["top1"]
    arrays = np.load(tmp_path / "e.npz")
    assert arrays["patch_embed"].shape == (24, 16, 32) and arrays["logits"].shape == (24, 3)


def test_finetune_seg(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "finetune-seg", "--checkpoint", workspace / "pre" / "final.orkt", "--train",
                       workspace / "seg3", "--test", workspace / "seg3", "--out", tmp_path / "seg", "--steps", "2",
                       "--batch", "4", "--taps", "0,1", "--channels", "8", "--fraction", "0.5",
                       "--layer-decay", "0.75", "--json")
    assert code == 0
    res = json.loads(out)
    assert res["steps"] == 2 and res["train_subset"] == 12 and 0 <= res["miou"] <= 1
    assert ckio.load(tmp_path / "seg" / "final.orkt").metadata["kind"] == "segmentation"


def test_zero_inflation_is_bit_identical_through_cli(workspace, capsys, tmp_path):
    ck = workspace / "pre" / "final.orkt"
    assert run(capsys, "inflate", "--in", ck, "--out", tmp_path / "inf.orkt", "--bands", "4", "--mode", "zero")[0] == 0
    code3, out3, _ = run(capsys, "eval", "--checkpoint", ck, "--data", workspace / "cls3", "--out", tmp_path / "a.npz")
    code4, out4, _ = run(capsys, "eval", "--checkpoint", tmp_path / "inf.orkt", "--data", workspace / "cls4",
                         "--out", tmp_path / "b.npz")
    assert code3 == code4 == 0
    a, b = np.load(tmp_path / "a.npz"), np.load(tmp_path / "b.npz")
    assert np.array_equal(a["patch_embed"], b["patch_embed"])
    assert json.loads(out3)["digests"]["patch_embed"] == json.loads(out4)["digests"]["patch_embed"]


def test_reshape_patch(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "reshape-patch", "--in", workspace / "pre" / "final.orkt", "--out",
                       tmp_path / "p8.orkt", "--patch", "8", "--json")
    assert code == 0 and json.loads(out) == {"out": str(tmp_path / "p8.orkt"), "patch": 8, "image": 32}
    ck = ckio.load(tmp_path / "p8.orkt")
    assert ck.tensors["encoder.patch_embed_weight"].shape[-2:] == (8, 8)
    assert not any(k.startswith(("optim/", "decoder.")) for k in ck.tensors)
    code, _, err = run(capsys, "reshape-patch", "--in", workspace / "pre" / "final.orkt", "--out",
                       tmp_path / "bad.orkt", "--patch", "5", "--image", "32")
    assert code == 4 and "error[input-size]" in err and "30" in err


def test_sample_manifest(capsys, tmp_path):
    code, out, _ = run(capsys, "sample-manifest", "--synthetic", 200, "--write-catalog", tmp_path / "cat.jsonl",
                       "--out", tmp_path / "man.jsonl", "--seed", 2)
    diag = json.loads(out)
    assert code == 0 and diag["violations"] == [] and len(read_jsonl(tmp_path / "man.jsonl")) == diag["views"]
    code, _, _ = run(capsys, "sample-manifest", "--catalog", tmp_path / "cat.jsonl", "--out", tmp_path / "m2.jsonl",
                     "--target", 20)
    assert code == 0 and len({e.location_id for e in read_jsonl(tmp_path / "m2.jsonl")}) == 20
    code, _, err = run(capsys, "sample-manifest", "--catalog", tmp_path / "cat.jsonl", "--out", tmp_path / "m3.jsonl",
                       "--target", 10)
    assert code == 5 and "stratum coverage" in err


def test_ddp_check(capsys):
    code, out, _ = run(capsys, "ddp-check", "--steps", 2)
    assert code == 0 and out.strip().endswith("f64)") and "PASS" in out


@pytest.mark.parametrize("argv,code,category", [
    (["calc", "params", "--recipe", "vit-z"], 2, "invalid-argument"),
    (["calc", "lr", "--base", "1e-3", "--batch", "0"], 2, "invalid-argument"),
    (["sample-manifest", "--synthetic", "20", "--out", "{tmp}/m.jsonl", "--population-fraction", "1.0",
      "--population-tolerance", "0"], 5, "quota"),
    (["pretrain", "--config", "{tmp}/missing.json"], 4, "input"),
])
def test_error_categories(capsys, tmp_path, argv, code, category):
    got, _, err = run(capsys, *[a.replace("{tmp}", str(tmp_path)) for a in argv])
    assert got == code and err.startswith(f"deskmae: error[{category}]:") and err.count("\n") == 1


def test_config_and_checkpoint_errors(workspace, capsys, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"recipe": "vit-micro", "learning_rate": 1}))
    got, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json")
    assert got == 2 and "error[config]" in err and "learning_rate" in err
    (tmp_path / "junk.orkt").write_bytes(b"not a checkpoint")
    got, _, err = run(capsys, "inflate", "--in", tmp_path / "junk.orkt", "--out", tmp_path / "x.orkt", "--bands", 4)
    assert got == 3 and "error[checkpoint]" in err


def test_band_mismatch_gives_remediation(workspace, capsys):
    got, _, err = run(capsys, "eval", "--checkpoint", workspace / "pre" / "final.orkt", "--data", workspace / "cls4")
    assert got == 3 and "error[checkpoint-mismatch]" in err and "deskmae inflate" in err
