import numpy as np
import pytest

from evifed import checkpoint
from evifed.errors import InvalidInputError
from evifed.federation import FedConfig, make_client
from evifed.model import build_backbone
from evifed.synthdata import generate


def test_round_trip_and_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"b": rng.normal(size=(3, 4)), "a": rng.normal(size=5), "scalar": np.array(2.5)}
    checkpoint.write_arrays(tmp_path / "x", arrays, {"k": 1})
    checkpoint.write_arrays(tmp_path / "y", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()
    back, meta = checkpoint.read_arrays(tmp_path / "x")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


def test_rejects_foreign_and_truncated_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello\n")
    with pytest.raises(InvalidInputError):
        checkpoint.read_arrays(tmp_path / "junk")
    checkpoint.write_arrays(tmp_path / "x", {"a": np.ones(10)})
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-16])
    with pytest.raises(InvalidInputError, match="truncated"):
        checkpoint.read_arrays(tmp_path / "t")


def test_client_save_load(tmp_path):
    cfg = FedConfig(T=2, per_client_n=40)
    data = generate(2, 40, 0)
    bb = build_backbone(cfg.backbone_config())
    src = make_client(cfg, 1, data[1], bb)
    rng = np.random.default_rng(3)
    for t in src.prompts.tensors() + src.head.tensors():
        t.data = rng.normal(size=t.shape)
    checkpoint.save_client(tmp_path / "c", src, cfg.seed_init)
    dst = make_client(cfg, 1, data[1], bb)
    meta = checkpoint.load_client_into(tmp_path / "c", dst)
    assert meta["client_id"] == 1 and meta["backbone_seed"] == cfg.seed_init
    assert dst.prompts.flat().tobytes() == src.prompts.flat().tobytes()
    for a, b in zip(dst.head.tensors(), src.head.tensors()):
        assert a.data.tobytes() == b.data.tobytes()
