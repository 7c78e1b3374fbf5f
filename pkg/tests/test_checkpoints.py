import pytest
import torch
from torch import nn

from adspeech.checkpoints import (Checkpoint, CheckpointError, FORMAT_VERSION,
                                  save_checkpoint)


def small_modules():
    torch.manual_seed(0)
    return {"encoder": nn.Linear(4, 4).state_dict(),
            "decoder": nn.Linear(4, 2).state_dict()}


class TestRoundTrip:
    def test_save_and_load(self, tmp_path):
        path = tmp_path / "m.pt"
        save_checkpoint(path, small_modules(), "digest123", {"family": "toy"})
        ckpt = Checkpoint.load(path)
        assert ckpt.config_digest == "digest123"
        assert ckpt.meta["family"] == "toy"
        assert ckpt.module_names == ("decoder", "encoder")

    def test_state_round_trips_tensors(self, tmp_path):
        modules = small_modules()
        path = tmp_path / "m.pt"
        save_checkpoint(path, modules, "")
        ckpt = Checkpoint.load(path)
        for name, sd in modules.items():
            loaded = ckpt.state(name)
            for k in sd:
                assert torch.equal(loaded[k], sd[k])


class TestAccessLog:
    def test_records_reads(self, tmp_path):
        path = tmp_path / "m.pt"
        save_checkpoint(path, small_modules(), "")
        ckpt = Checkpoint.load(path)
        assert ckpt.accessed == set()
        ckpt.state("encoder")
        assert ckpt.accessed == {"encoder"}
        ckpt.state("decoder")
        assert ckpt.accessed == {"encoder", "decoder"}

    def test_has_does_not_count_as_access(self, tmp_path):
        path = tmp_path / "m.pt"
        save_checkpoint(path, small_modules(), "")
        ckpt = Checkpoint.load(path)
        assert ckpt.has("decoder")
        assert ckpt.accessed == set()


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope.pt")

    def test_missing_module(self, tmp_path):
        path = tmp_path / "m.pt"
        save_checkpoint(path, small_modules(), "")
        ckpt = Checkpoint.load(path)
        with pytest.raises(CheckpointError, match="quantizer"):
            ckpt.state("quantizer")

    def test_unreadable_payload(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            Checkpoint.load(path)

    def test_wrong_format_version(self, tmp_path):
        path = tmp_path / "v.pt"
        torch.save({"format_version": FORMAT_VERSION + 1}, path)
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.load(path)
