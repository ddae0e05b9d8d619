from __future__ import annotations

import json
import struct

import numpy as np
import pytest
import torch

from raresynth.checkpoint import (
    MAGIC,
    decode_archive,
    encode_archive,
    load_adapter,
    load_archive,
    load_classifier,
    load_diffusion,
    save_adapter,
    save_classifier,
    save_diffusion,
)
from raresynth.classifier import TrainConfig, train_classifier
from raresynth.config import PROFILE_ENV, from_dict, load_config, profile_defaults
from raresynth.diffusion import UNetSpec, build_unet
from raresynth.errors import CheckpointError, FormatError, InvalidArgument
from raresynth.io import atomic_dir, atomic_write_text
from raresynth.lora import LoRAConfig, attach_lora
from raresynth.rng import derive_seed

from conftest import TINY_SPEC, blob_dataset

# -- config -----------------------------------------------------------------


@pytest.mark.parametrize("profile", ["desk", "paper"])
def test_config_roundtrip(profile, tmp_path):
    cfg = profile_defaults(profile)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_paper_profile_values():
    cfg = profile_defaults("paper")
    assert (cfg.lora.rank, cfg.lora.alpha, cfg.lora.dropout, cfg.lora.steps, cfg.lora.lr) == (64, 8.0, 0.08, 200, 5e-3)
    assert cfg.lora.scale == 0.125
    assert cfg.generate.pool_size == 1000
    assert cfg.sweep.ratios == (0.0, 0.5, 1.0, 2.0, 4.0, 10.0, 20.0)
    assert 20 <= cfg.generate.sampler.steps <= 24
    assert 1.5 <= cfg.generate.sampler.guidance_scale <= 2.5


def test_profile_env(monkeypatch):
    monkeypatch.setenv(PROFILE_ENV, "paper")
    assert load_config(None).profile == "paper"
    monkeypatch.setenv(PROFILE_ENV, "laptop")
    with pytest.raises(InvalidArgument):
        load_config(None)


def test_partial_config_fills_defaults():
    cfg = from_dict({"seed": 5, "sweep": {"ratios": [0, 2]}}, profile="desk")
    assert cfg.seed == 5 and cfg.sweep.ratios == (0.0, 2.0)
    assert cfg.lora == profile_defaults("desk").lora


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(FormatError, match="unknown keys"):
        from_dict({"sede": 1})
    with pytest.raises(FormatError, match="sweep"):
        from_dict({"sweep": {"folds": 5, "extra": 1}})
    with pytest.raises(FormatError):
        from_dict({"schema_version": 99})
    with pytest.raises(InvalidArgument):
        from_dict({"sweep": {"ratios": [2, 1]}})
    with pytest.raises(InvalidArgument):
        from_dict({"data": {"domain": "mars"}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(FormatError):
        load_config(bad)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("desk", "paper", "smoke"):
        cfg = load_config(root / f"{name}.json")
        assert cfg.schema_version == 1
    assert load_config(root / "desk.json") == profile_defaults("desk")
    assert load_config(root / "paper.json") == profile_defaults("paper")


# -- rng / io ---------------------------------------------------------------


def test_derive_seed_stable():
    assert derive_seed(0, "run", 1) == derive_seed(0, "run", 1)
    assert derive_seed(0, "run", 1) != derive_seed(0, "run", 2)
    assert 0 <= derive_seed(123) < 2**63
    with pytest.raises(ValueError):
        derive_seed(-1)


def test_atomic_dir_replaces_and_cleans_up(tmp_path):
    target = tmp_path / "d"
    with atomic_dir(target) as tmp:
        (tmp / "a").write_text("1")
    with pytest.raises(RuntimeError):
        with atomic_dir(target) as tmp:
            (tmp / "b").write_text("2")
            raise RuntimeError("boom")
    assert sorted(p.name for p in target.iterdir()) == ["a"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]
    atomic_write_text(tmp_path / "f.txt", "x")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d", "f.txt"]


# -- checkpoints -------------------------------------------------------------


def test_archive_layout():
    blob = encode_archive("demo", {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3)}, {"k": 1})
    assert blob[:8] == MAGIC
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + n])
    assert manifest["tensors"][0]["shape"] == [2, 3]
    data = np.frombuffer(blob[16 + n :], dtype="<f4")
    assert data.tolist() == [0, 1, 2, 3, 4, 5]
    m2, t2 = decode_archive(blob)
    assert m2 == manifest and t2["w"].shape == (2, 3)


def test_archive_corruption_detected(tmp_path):
    blob = encode_archive("demo", {"w": torch.ones(4)})
    with pytest.raises(CheckpointError):
        decode_archive(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_archive(blob[:-2])
    p = tmp_path / "x.rsck"
    p.write_bytes(blob)
    with pytest.raises(CheckpointError):
        load_archive(p, kind="diffusion")


def test_diffusion_checkpoint_byte_stable(tmp_path):
    m = build_unet(TINY_SPEC, 1)
    save_diffusion(tmp_path / "a.rsck", m, {"seed": 1})
    loaded, manifest = load_diffusion(tmp_path / "a.rsck")
    save_diffusion(tmp_path / "b.rsck", loaded, manifest["meta"]["config"])
    assert (tmp_path / "a.rsck").read_bytes() == (tmp_path / "b.rsck").read_bytes()
    for p, q in zip(m.parameters(), loaded.parameters()):
        assert torch.equal(p, q)


def test_diffusion_checkpoint_shape_validation(tmp_path):
    m = build_unet(TINY_SPEC, 1)
    wrong_arch = {"arch": UNetSpec((4, 8), 1, 8).to_dict()}
    (tmp_path / "bad.rsck").write_bytes(encode_archive("diffusion", m.state_dict(), wrong_arch))
    with pytest.raises(CheckpointError):
        load_diffusion(tmp_path / "bad.rsck")


def test_adapter_checkpoint_roundtrip(tmp_path):
    base = build_unet(TINY_SPEC, 2)
    ad = attach_lora(base, LoRAConfig(rank=2, targets=["time_mlp.*"]), seed=4)
    with torch.no_grad():
        for layer in ad.adapters().values():
            layer.B.normal_()
    save_adapter(tmp_path / "ad.rsck", ad)
    back, _ = load_adapter(tmp_path / "ad.rsck", base)
    save_adapter(tmp_path / "ad2.rsck", back)
    assert (tmp_path / "ad.rsck").read_bytes() == (tmp_path / "ad2.rsck").read_bytes()
    with pytest.raises(CheckpointError):
        load_adapter(tmp_path / "ad.rsck", build_unet(UNetSpec((4, 8), 1, 8), 0))


def test_classifier_checkpoint_roundtrip(tmp_path):
    ds = blob_dataset(6, 6)
    clf, _ = train_classifier(ds, TrainConfig(epochs=1, batch_size=4, widths=(4, 4, 8)))
    save_classifier(tmp_path / "c.rsck", clf)
    back, _ = load_classifier(tmp_path / "c.rsck")
    assert back.trained
    np.testing.assert_array_equal(back.logits(ds.images()), clf.logits(ds.images()))
    save_classifier(tmp_path / "c2.rsck", back)
    assert (tmp_path / "c.rsck").read_bytes() == (tmp_path / "c2.rsck").read_bytes()
