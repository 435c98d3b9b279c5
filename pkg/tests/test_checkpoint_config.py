import json
import struct

import numpy as np
import pytest

from bflow.checkpoint import (
    MAGIC,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_load_into,
    checkpoint_read,
    checkpoint_save,
    read_container,
)
from bflow.config import ConfigError, RunConfig, dataset_shape, model_config, train_config, validate
from bflow.errors import CorruptCheckpointError, InvalidArgumentError, ShapeMismatchError
from bflow.flow import build_model

CFG = dict(L=2, K=2, coupling_channels=8, butterfly_levels=2, block_size=2, init="rot", seed=1)


@pytest.fixture
def saved(tmp_path):
    model = build_model(CFG, (2, 8))
    rng = np.random.default_rng(0)
    model.log_prob(rng.standard_normal((8, 2, 8)))
    for v in model.parameters().values():
        v += 0.1 * rng.standard_normal(v.shape)
    path = tmp_path / "m.bflw"
    checkpoint_save(model, path, iteration=17, run_config={"note": 1}, extras={"perm": np.arange(4.0)})
    return model, path


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, saved, tmp_path):
        model, path = saved
        ck = checkpoint_read(path)
        again = checkpoint_bytes(ck.model, ck.iteration, ck.run_config, ck.extras)
        assert again == path.read_bytes()
        assert ck.iteration == 17 and ck.run_config == {"note": 1}
        assert np.array_equal(ck.extras["perm"], np.arange(4.0))
        x = np.random.default_rng(1).standard_normal((3, 2, 8))
        assert np.array_equal(ck.model.log_prob(x)[0], model.log_prob(x)[0])

    def test_layout(self, saved):
        _, path = saved
        data = path.read_bytes()
        assert data.startswith(MAGIC)
        (n,) = struct.unpack("<Q", data[6:14])
        manifest = json.loads(data[14 : 14 + n])
        offsets = [e["offset"] for e in manifest["directory"]]
        counts = [e["count"] for e in manifest["directory"]]
        assert offsets == sorted(offsets) and offsets[0] == 0
        assert all(o + 8 * c == nxt for o, c, nxt in zip(offsets, counts, offsets[1:]))
        assert len(data) == 14 + n + 8 * sum(counts)
        assert manifest["input_shape"] == [2, 8] and manifest["initialized"] is True

    def test_truncated(self, saved, tmp_path):
        _, path = saved
        bad = tmp_path / "t.bflw"
        data = path.read_bytes()
        for cut in (3, 20, len(data) - 8):
            bad.write_bytes(data[:cut])
            with pytest.raises(CorruptCheckpointError):
                checkpoint_load(bad)

    def test_bad_magic_and_manifest(self, saved, tmp_path):
        _, path = saved
        data = path.read_bytes()
        bad = tmp_path / "b.bflw"
        bad.write_bytes(b"BFLW2\n" + data[6:])
        with pytest.raises(CorruptCheckpointError):
            checkpoint_load(bad)
        bad.write_bytes(data[:14] + b"#" + data[15:])
        with pytest.raises(CorruptCheckpointError):
            checkpoint_load(bad)

    def test_directory_gap(self, tmp_path):
        blob = json.dumps({"directory": [{"name": "a", "shape": [1], "offset": 8, "count": 1}]}).encode()
        bad = tmp_path / "g.bflw"
        bad.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + b"\0" * 16)
        with pytest.raises(CorruptCheckpointError):
            read_container(bad)

    def test_cross_config_load(self, saved):
        _, path = saved
        other = build_model({**CFG, "coupling_channels": 16}, (2, 8))
        with pytest.raises(ShapeMismatchError):
            checkpoint_load_into(other, path)
        with pytest.raises(ShapeMismatchError):
            checkpoint_load_into(build_model(CFG, (4, 4)), path)

    def test_load_into_matching_model(self, saved):
        model, path = saved
        fresh = checkpoint_load_into(build_model(CFG, (2, 8)), path)
        assert fresh.initialized
        assert all(np.array_equal(fresh.parameters()[k], v) for k, v in model.parameters().items())


class TestConfig:
    def test_defaults_validate(self):
        assert validate(RunConfig()) == (2,)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.from_dict({"Lz": 3})
        assert info.value.field == "Lz"

    @pytest.mark.parametrize(
        "override,field",
        [
            ({"L": 2, "dataset": "permuted_gaussian:dim=2"}, "L"),
            ({"block_size": 3, "dataset": "permuted_gaussian:dim=16"}, "block_size"),
            ({"block_size": 8, "dataset": "permuted_gaussian:dim=8"}, "block_size"),
            ({"butterfly_levels": 5, "dataset": "permuted_gaussian:dim=16"}, "butterfly_levels"),
            ({"butterfly_levels": [2, 2], "dataset": "permuted_gaussian:dim=16"}, "butterfly_levels"),
            ({"segments": [8, 4], "butterfly_levels": [1, 1], "dataset": "permuted_gaussian:dim=16"}, "segments"),
            ({"init": "random"}, "init"),
            ({"ema": "sometimes"}, "ema"),
            ({"lr": 0}, "lr"),
            ({"ema_decay": 1.5}, "ema_decay"),
            ({"butterfly_lr_gamma": 0.0}, "butterfly_lr_gamma"),
            ({"dataset": "mnist"}, "dataset"),
        ],
    )
    def test_rejections_name_the_field(self, override, field):
        with pytest.raises(ConfigError) as info:
            validate(RunConfig.from_dict(override))
        assert info.value.field == field

    def test_validation_matches_model_construction(self):
        # everything validate accepts must build; the rejections above would fail in the math modules
        for d, c, m in [(16, 1, 4), (16, 2, 3), (24, 3, 3), (32, 4, 2)]:
            cfg = RunConfig.from_dict(
                {"dataset": f"permuted_gaussian:dim={d}" if d & (d - 1) == 0 else "standard_normal:dim=24",
                 "L": 1, "K": 1, "coupling_channels": 4, "block_size": c, "butterfly_levels": m}
            )
            shape = validate(cfg)
            build_model(model_config(cfg), shape)
        with pytest.raises(InvalidArgumentError):
            build_model({"L": 1, "K": 1, "block_size": 3, "butterfly_levels": 1}, (16,))

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"L": 2, "K": 4, "dataset": "periodic1d"}))
        cfg = RunConfig.load(p)
        assert validate(cfg) == (2, 64) and cfg.K == 4
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            RunConfig.load(p)
        p.write_text("{")
        with pytest.raises(ConfigError):
            RunConfig.load(p)

    def test_shapes_and_splits(self):
        assert dataset_shape("permuted_patterns:side=16") == (1, 16, 16)
        assert dataset_shape({"kind": "standard_normal", "dim": 4}) == (4,)
        cfg = RunConfig()
        assert set(model_config(cfg)) | set(train_config(cfg)) <= set(cfg.to_dict())
