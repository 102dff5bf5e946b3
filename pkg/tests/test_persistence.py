from pathlib import Path

import numpy as np
import pytest

from reir.binfmt import BadMagicError, ChecksumError, EndiannessError, FormatError, TruncatedFileError, VersionError
from reir.engine import InstanceRecord, build_index, index_bytes, load_index, parse_index, save_index
from reir.metrics import Box
from reir.model import ModelDims
from reir.more import MoreConfig
from reir.trainer import (
    Checkpoint,
    TrainConfig,
    checkpoint_bytes,
    initial_params,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from reir.numerics import make_rng

from test_engine import random_gallery

FIXTURES = Path(__file__).parent / "fixtures"


def same_index(a, b):
    assert a.dim == b.dim and a.checksum == b.checksum
    for f in ("image_ids", "instance_ids", "flat", "pred_boxes", "gt_boxes", "gt_flags"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


class TestIndexFile:
    def test_round_trip(self, tmp_path):
        idx = build_index(random_gallery(0, n_images=12))
        save_index(idx, tmp_path / "g.reir")
        same_index(idx, load_index(tmp_path / "g.reir"))

    def test_round_trip_without_gt(self):
        recs = [InstanceRecord(1, j, np.ones(3) * j, Box(0, 0, 1, 1)) for j in range(3)]
        idx = build_index(recs)
        back = parse_index(index_bytes(idx))
        same_index(idx, back)
        assert back.record(0).gt_box is None

    def test_empty_round_trip(self):
        idx = build_index([])
        assert len(parse_index(index_bytes(idx))) == 0

    def test_layout_size(self):
        idx = build_index(random_gallery(1, n_images=3, dim=5))
        n_img, n = idx.n_images, len(idx)
        per_instance = 8 + 1 + 16 + 16 + 4 * 5
        assert len(index_bytes(idx)) == 4 + 12 + n_img * 12 + n * per_instance + 8

    def test_every_single_byte_corruption_detected(self):
        blob = bytearray(index_bytes(build_index(random_gallery(2, n_images=2, max_inst=2, dim=2))))
        for pos in range(len(blob)):
            bad = bytearray(blob)
            bad[pos] ^= 0x5A
            with pytest.raises(FormatError):
                parse_index(bytes(bad))

    def test_corrupted_payload_is_checksum_error(self):
        blob = bytearray(index_bytes(build_index(random_gallery(3, n_images=4))))
        for pos in range(40, len(blob) - 8, 17):
            bad = bytearray(blob)
            bad[pos] ^= 0x01
            with pytest.raises(ChecksumError):
                parse_index(bytes(bad))

    def test_truncation(self):
        blob = index_bytes(build_index(random_gallery(4, n_images=4)))
        for cut in (1, 7, 8, 9, 100, len(blob) - 20):
            with pytest.raises(TruncatedFileError):
                parse_index(blob[:-cut])

    def test_trailing_bytes(self):
        from reir.binfmt import seal

        blob = index_bytes(build_index(random_gallery(5, n_images=2)))
        with pytest.raises(FormatError, match="trailing"):
            parse_index(seal(blob[:-8] + b"\0\0\0\0"))

    def test_bad_magic_and_version(self):
        blob = bytearray(index_bytes(build_index(random_gallery(6, n_images=1))))
        with pytest.raises(BadMagicError):
            parse_index(b"XXXX" + bytes(blob[4:]))
        blob[4] = 9
        with pytest.raises(VersionError):
            parse_index(bytes(blob))

    def test_error_kinds_distinct(self):
        blob = index_bytes(build_index(random_gallery(7, n_images=2)))
        flipped = bytearray(blob)
        flipped[-20] ^= 1
        cases = [b"XXXX" + blob[4:], blob[:4] + b"\x02" + blob[5:], blob[:-30], bytes(flipped)]
        kinds = []
        for bad in cases:
            with pytest.raises(FormatError) as info:
                parse_index(bad)
            kinds.append(type(info.value))
        assert kinds == [BadMagicError, VersionError, TruncatedFileError, ChecksumError]

    def test_little_endian_fixture(self):
        idx = load_index(FIXTURES / "index_little_endian.bin")
        rec = idx.record(0)
        assert (rec.image_id, rec.instance_id) == (7, 3)
        assert rec.gt_box == Box(1.0, 2.0, 3.0, 4.0)
        assert rec.box == Box(1.5, 2.0, 3.0, 4.0)
        assert rec.feature.tolist() == [0.25, -0.5]

    def test_little_endian_fixture_matches_writer(self):
        rec = InstanceRecord(7, 3, np.array([0.25, -0.5]), Box(1.5, 2.0, 3.0, 4.0), Box(1.0, 2.0, 3.0, 4.0))
        assert index_bytes(build_index([rec])) == (FIXTURES / "index_little_endian.bin").read_bytes()

    def test_big_endian_fixture_rejected(self):
        with pytest.raises(EndiannessError):
            load_index(FIXTURES / "index_big_endian.bin")


def checkpoint(stage=1, seed=3):
    cfg = TrainConfig(stage=stage, seed=seed, dims=ModelDims(4, 3, 2, 5), more=MoreConfig(1, 3, 2))
    params = initial_params(cfg)
    rng = make_rng(seed)
    mom = {f"m:{k}": rng.normal(size=v.shape) for k, v in params.to_arrays().items()}
    return Checkpoint(params, mom, cfg, stage, seed, 12, [{"epoch": 1, "total": 0.5}])


class TestCheckpointFile:
    @pytest.mark.parametrize("stage", [1, 2])
    def test_round_trip(self, tmp_path, stage):
        ck = checkpoint(stage)
        save_checkpoint(ck, tmp_path / "c.reic")
        back = load_checkpoint(tmp_path / "c.reic")
        assert (back.stage, back.seed, back.step, back.config, back.history) == (
            ck.stage, ck.seed, ck.step, ck.config, ck.history
        )
        a, b = ck.params.to_arrays(), back.params.to_arrays()
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])
        for k in ck.momentum:
            assert np.array_equal(ck.momentum[k], back.momentum[k])

    def test_bitwise_stable(self):
        assert checkpoint_bytes(checkpoint()) == checkpoint_bytes(parse_checkpoint(checkpoint_bytes(checkpoint())))

    def test_corruption(self):
        blob = bytearray(checkpoint_bytes(checkpoint()))
        for pos in range(0, len(blob), 97):
            bad = bytearray(blob)
            bad[pos] ^= 0x10
            with pytest.raises(FormatError):
                parse_checkpoint(bytes(bad))

    def test_truncation_and_magic(self):
        blob = checkpoint_bytes(checkpoint())
        with pytest.raises(TruncatedFileError):
            parse_checkpoint(blob[:-50])
        with pytest.raises(BadMagicError):
            parse_checkpoint(b"REIR" + blob[4:])
