import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from safemark.datamodel import (DomainError, FormatError, Ledger, ProvenanceRecord, RunConfig, ShapeError,
                                StateError, check_latent_shape, file_digest, from_uint8, load_checkpoint,
                                load_image, save_checkpoint, save_image, to_uint8)


def test_runconfig_defaults_validate():
    cfg = RunConfig()
    assert (cfg.T, cfg.lam, cfg.gamma, cfg.cfg_scale) == (50, 10, 1.0, 7.5)


@pytest.mark.parametrize("bad", [dict(lam=51), dict(lam=-1), dict(gamma=0.0), dict(f=3), dict(T=0),
                                 dict(cfg_scale=-1.0), dict(eta=1.5), dict(resolution=30)])
def test_runconfig_rejects(bad):
    with pytest.raises(DomainError):
        RunConfig(**bad)


def test_config_file_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nlambda = 5\ngamma=0.1\nadv = true\n")
    cfg = RunConfig.from_file(path)
    assert (cfg.lam, cfg.gamma, cfg.adv) == (5, 0.1, True)
    cfg2 = RunConfig.from_mapping({"lam": 7}, cfg)
    assert (cfg2.lam, cfg2.gamma) == (7, 0.1)
    path.write_text("nonsense = 1\n")
    with pytest.raises(DomainError):
        RunConfig.from_file(path)
    path.write_text("lam 3\n")
    with pytest.raises(FormatError):
        RunConfig.from_file(path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=48, max_size=48))
def test_uint8_roundtrip(values):
    arr = np.array(values, dtype=np.uint8).reshape(4, 4, 3)
    assert np.array_equal(to_uint8(from_uint8(arr)), arr)


def test_save_load_image(tmp_path):
    img = torch.rand(3, 16, 16) * 2 - 1
    digest = save_image(img, tmp_path / "a.png")
    assert digest == file_digest(tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert (back - img).abs().max() <= 1 / 127.5 + 1e-6
    # same tensor, same bytes
    assert save_image(img, tmp_path / "b.png") == digest


def test_load_image_errors(tmp_path):
    Image.new("L", (8, 8)).save(tmp_path / "gray.png")
    with pytest.raises(FormatError):
        load_image(tmp_path / "gray.png")
    Image.new("RGB", (8, 6)).save(tmp_path / "wide.png")
    with pytest.raises(ShapeError):
        load_image(tmp_path / "wide.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(tmp_path / "junk.png")
    assert load_image(tmp_path / "wide.png", resolution=8).shape == (3, 8, 8)


def test_latent_shape():
    assert check_latent_shape(32, 4) == 8
    with pytest.raises(ShapeError):
        check_latent_shape(30, 4)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"w": torch.randn(3, 4), "b": torch.randn(4), "s": torch.tensor(2.5)}
    d1 = save_checkpoint(tmp_path / "c.ckpt", tensors, {"d": 4}, {"run": {"seed": 1}})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta["config"] == {"d": 4} and meta["extra"]["run"]["seed"] == 1
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    assert save_checkpoint(tmp_path / "d.ckpt", tensors, {"d": 4}, {"run": {"seed": 1}}) == d1


def test_checkpoint_errors(tmp_path):
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX\0\0\0\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    save_checkpoint(tmp_path / "c.ckpt", {"w": torch.zeros(2)})
    with open(tmp_path / "c.ckpt", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_ledger_append_lookup(tmp_path):
    led = Ledger(tmp_path / "ledger.jsonl")
    assert led.records() == [] and led.lookup("x") is None
    r1 = ProvenanceRecord("aa", "wm-001", "0101", 1, 100, "a photo")
    r2 = ProvenanceRecord("bb", "user", "1000", 2, 101, "[U] mine")
    led.append(r1)
    led.append(r2)
    assert led.records() == [r1, r2]
    assert led.lookup("bb") == r2
    assert set(led.index()) == {"aa", "bb"}
    line = (tmp_path / "ledger.jsonl").read_text().splitlines()[0]
    assert json.loads(line)["key"] == "0101"


def test_timestamp_pinned(monkeypatch):
    from safemark.datamodel import utc_seconds

    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1234")
    assert utc_seconds() == 1234
