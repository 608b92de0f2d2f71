import json
import os

import numpy as np
import pytest

from ddseq.checkpoint import load_denoiser, load_labeler, load_tensors, save_denoiser, save_labeler, save_tensors
from ddseq.cli import ConfigError, main, resolve_config
from ddseq.denoiser import Denoiser, DenoiserConfig
from ddseq.guidance import WindowLabeler
from ddseq.vocab import build_vocab

VOCAB = build_vocab()
TINY = DenoiserConfig(num_layers=1, num_heads=2, embed_dim=16, ffn_dim=32, max_len=64)


def file_bytes(d):
    out = {}
    for name in ("manifest.json", "weights.bin"):
        with open(os.path.join(d, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_tensor_roundtrip_exact(tmp_path):
    tensors = {"a": np.arange(12, dtype=np.float64).reshape(3, 4), "b": np.ones(5)}
    save_tensors(str(tmp_path / "ck"), tensors, {"kind": "test"})
    back, cfg = load_tensors(str(tmp_path / "ck"))
    assert cfg["kind"] == "test"
    np.testing.assert_array_equal(back["a"], tensors["a"])


def test_manifest_tiles_weights_exactly(tmp_path):
    tensors = {"x": np.zeros((2, 3)), "y": np.ones(7), "z": np.full((1, 1), 2.0)}
    d = str(tmp_path / "ck")
    save_tensors(d, tensors, {})
    manifest = json.load(open(os.path.join(d, "manifest.json")))
    size = os.path.getsize(os.path.join(d, "weights.bin"))
    spans = sorted((e["offset"], e["length"]) for e in manifest["tensors"].values())
    at = 0
    for off, ln in spans:
        assert off == at
        at = off + ln
    assert at == size


def test_save_load_save_bytes_identical(tmp_path):
    model = Denoiser(TINY, VOCAB, seed=1)
    d1, d2 = str(tmp_path / "c1"), str(tmp_path / "c2")
    save_denoiser(d1, model, step=3)
    loaded, cfg, _ = load_denoiser(d1)
    assert cfg["step"] == 3
    save_denoiser(d2, loaded, step=3)
    a, b = file_bytes(d1), file_bytes(d2)
    assert a["weights.bin"] == b["weights.bin"]
    assert a["manifest.json"] == b["manifest.json"]


def test_checkpoint_restores_forward_exactly(tmp_path):
    model = Denoiser(TINY, VOCAB, seed=2)
    d = str(tmp_path / "ck")
    save_denoiser(d, model)
    loaded, _, _ = load_denoiser(d)
    x = np.array(VOCAB.encode("ACDEF"))
    # float32 on disk: after one roundtrip both models live on the f32 grid
    save_denoiser(d, loaded)
    reloaded, _, _ = load_denoiser(d)
    np.testing.assert_array_equal(loaded.forward(x), reloaded.forward(x))


def test_checkpoint_preserves_adapter_and_freeze(tmp_path):
    model = Denoiser(TINY, VOCAB, seed=3)
    model.attach_adapter(cond_dim=3)
    d = str(tmp_path / "ck")
    save_denoiser(d, model)
    loaded, cfg, _ = load_denoiser(d)
    assert loaded.adapter is not None
    assert loaded.adapter_cond_dim == 3
    assert loaded.store.trainable_names() == model.store.trainable_names()


def test_corrupt_manifest_rejected(tmp_path):
    model = Denoiser(TINY, VOCAB, seed=1)
    d = str(tmp_path / "ck")
    save_denoiser(d, model)
    manifest = json.load(open(os.path.join(d, "manifest.json")))
    first = next(iter(manifest["tensors"]))
    manifest["tensors"][first]["offset"] += 4
    with open(os.path.join(d, "manifest.json"), "w") as fh:
        json.dump(manifest, fh)
    with pytest.raises(ValueError, match="tile"):
        load_denoiser(d)


def test_labeler_roundtrip(tmp_path):
    gm = WindowLabeler(VOCAB, seed=5)
    d = str(tmp_path / "gm")
    save_labeler(d, gm)
    back, _ = load_labeler(d)
    ids = np.array(VOCAB.encode("ACDEF"))
    f32 = lambda x: x.astype(np.float32)
    np.testing.assert_allclose(f32(gm.predict(ids)), f32(back.predict(ids)), atol=1e-6)


def test_wrong_kind_rejected(tmp_path):
    gm = WindowLabeler(VOCAB, seed=5)
    d = str(tmp_path / "gm")
    save_labeler(d, gm)
    with pytest.raises(ValueError, match="labeler"):
        load_denoiser(d)


# -- run config ---------------------------------------------------------------


def test_resolve_config_defaults_and_overrides():
    cfg = resolve_config({"train": {"mlm_steps": 7}})
    assert cfg["train"]["mlm_steps"] == 7
    assert cfg["train"]["batch_size"] == 16  # default preserved


def test_resolve_config_rejects_unknown_key_with_path():
    with pytest.raises(ConfigError, match="train.bogus"):
        resolve_config({"train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="^unknown config key: nope"):
        resolve_config({"nope": {}})


# -- CLI end to end -----------------------------------------------------------


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    cfg = {
        "model": {"num_layers": 1, "num_heads": 2, "embed_dim": 16, "ffn_dim": 32, "max_len": 64},
        "schedule": {"T": 8},
        "train": {"stage": "two_stage", "mlm_steps": 5, "diffusion_steps": 5, "batch_size": 4, "eval_interval": 5},
        "data": {"n_train": 40, "n_eval": 8},
        "sample": {"steps": 12},
    }
    cfg_path = os.path.join(out, "cfg.json")
    os.makedirs(out, exist_ok=True)
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    code = main(["train", "--config", cfg_path, "--out", out])
    assert code == 0
    return out


def test_cli_train_outputs(trained_dir):
    assert os.path.isdir(os.path.join(trained_dir, "checkpoint"))
    assert os.path.exists(os.path.join(trained_dir, "config.json"))
    lines = open(os.path.join(trained_dir, "metrics.jsonl")).read().strip().splitlines()
    assert len(lines) == 10
    record = json.loads(lines[-1])
    assert {"step", "stage", "loss", "acc", "grad_norm", "pppl"} <= set(record)


def test_cli_train_zero_steps_equals_init(tmp_path):
    out = str(tmp_path / "zero")
    code = main(["train", "--out", out, "--steps", "0"])
    assert code == 0
    loaded, cfg, _ = load_denoiser(os.path.join(out, "checkpoint"))
    fresh = Denoiser(loaded.config, loaded.vocab, seed=0)
    for name in fresh.store.params:
        np.testing.assert_array_equal(
            loaded.store.params[name], fresh.store.params[name].astype(np.float32).astype(np.float64)
        )


def test_cli_sample_reproducible_bytes(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    f1, f2 = str(tmp_path / "a.fasta"), str(tmp_path / "b.fasta")
    assert main(["sample", "--checkpoint", ck, "--length", "20", "--num", "5", "--seed", "9", "--steps", "10", "--out", f1]) == 0
    assert main(["sample", "--checkpoint", ck, "--length", "20", "--num", "5", "--seed", "9", "--steps", "10", "--out", f2]) == 0
    assert open(f1, "rb").read() == open(f2, "rb").read()
    recs = open(f1).read().count(">")
    assert recs == 5
    sidecar = json.load(open(f1 + ".json"))
    assert sidecar["seed"] == 9 and len(sidecar["committed_per_step"]) == 5


def test_cli_sample_rejects_overlength(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    code = main(["sample", "--checkpoint", ck, "--length", "500", "--out", str(tmp_path / "x.fasta")])
    assert code == 2


def test_cli_infill_preserves_observed(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    tpl = str(tmp_path / "tpl.fasta")
    with open(tpl, "w") as fh:
        fh.write(">t\nAXXXXXXD\n")
    out = str(tmp_path / "fill.fasta")
    assert main(["infill", "--checkpoint", ck, "--template", tpl, "--num", "3", "--steps", "6", "--out", out]) == 0
    from ddseq.fasta import read_fasta

    for rec in read_fasta(out, VOCAB):
        text = VOCAB.decode(rec.seq.ids)
        assert text[0] == "A" and text[-1] == "D" and "X" not in text


def test_cli_infill_rejects_no_free(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    tpl = str(tmp_path / "tpl.fasta")
    with open(tpl, "w") as fh:
        fh.write(">t\nACD\n")
    code = main(["infill", "--checkpoint", ck, "--template", tpl, "--out", str(tmp_path / "o.fasta")])
    assert code == 2


def test_cli_repr_shapes(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    fa = str(tmp_path / "in.fasta")
    with open(fa, "w") as fh:
        fh.write(">a\nACDEF\n>b\nGHIKLMN\n")
    out = str(tmp_path / "repr")
    assert main(["repr", "--checkpoint", ck, "--fasta", fa, "--out", out]) == 0
    tensors, cfg = load_tensors(out)
    assert cfg["records"] == ["a", "b"]
    assert tensors["rec00000"].shape == (5, 16)
    assert tensors["rec00001"].shape == (7, 16)


def test_cli_repr_rejects_mask(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    fa = str(tmp_path / "in.fasta")
    with open(fa, "w") as fh:
        fh.write(">a\nACXEF\n")
    assert main(["repr", "--checkpoint", ck, "--fasta", fa, "--out", str(tmp_path / "r")]) == 2


def test_cli_eval_self_sample(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    out = str(tmp_path / "report.json")
    assert main(["eval", "--checkpoint", ck, "--self-sample", "3", "--length", "16", "--out", out]) == 0
    report = json.load(open(out))
    assert report["n_samples"] == 3
    assert 0.0 <= report["grammar_validity"] <= 1.0


def test_cli_guide_and_classifier(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    gm_dir = str(tmp_path / "gm")
    cfg_path = os.path.join(trained_dir, "cfg.json")
    assert main(["train-classifier", "--config", cfg_path, "--steps", "60", "--out", gm_dir]) == 0
    out = str(tmp_path / "guided.fasta")
    code = main([
        "guide", "--checkpoint", ck, "--classifier", gm_dir, "--labels", "HHHHHHHHHH",
        "--eta", "2.0", "--num", "2", "--steps", "8", "--out", out,
    ])
    assert code == 0
    report = json.load(open(out + ".report.json"))
    assert 0.0 <= report["annotation_match_rate"] <= 1.0


def test_cli_guide_cfg_eta_requires_adapter(trained_dir, tmp_path):
    ck = os.path.join(trained_dir, "checkpoint")
    code = main([
        "guide", "--checkpoint", ck, "--labels", "HHHH", "--cfg-eta", "1.5",
        "--num", "1", "--out", str(tmp_path / "x.fasta"),
    ])
    assert code == 2


def test_cli_resume_continues_step_counter(trained_dir, tmp_path):
    out2 = str(tmp_path / "resumed")
    ck = os.path.join(trained_dir, "checkpoint")
    cfg_path = os.path.join(trained_dir, "cfg.json")
    code = main(["train", "--config", cfg_path, "--out", out2, "--resume", ck])
    assert code == 0
    _, cfg, _ = load_denoiser(os.path.join(out2, "checkpoint"))
    assert cfg["step"] == 10  # plan length; resume starts at 10, so no extra steps run

    lines = open(os.path.join(out2, "metrics.jsonl")).read().strip().splitlines()
    assert lines == []  # nothing left to do


def test_cli_unknown_config_key_exit_code(tmp_path):
    bad = str(tmp_path / "bad.json")
    with open(bad, "w") as fh:
        json.dump({"optimizer": {}}, fh)
    assert main(["train", "--config", bad, "--out", str(tmp_path / "o")]) == 2
