"""Binary model bundles: round-trip fidelity and corruption rejection."""

import numpy as np
import pytest

from trajdistill import (
    CheckpointBundle,
    CheckpointError,
    Denoiser,
    DenoiserConfig,
    Encoder,
    EncoderConfig,
    NoiseSchedule,
    RandomSource,
    Standardizer,
    load_checkpoint,
    save_checkpoint,
)

DEN_CFG = DenoiserConfig(
    hidden=8, horizon=4, point_dim=2, context_width=8, time_width=4, layers=1, heads=2
)
ENC_CFG = EncoderConfig(
    history_len=4, recurrent_width=6, neighbor_width=4, out_width=8, max_neighbors=2
)


def make_bundle(seed: int = 1) -> CheckpointBundle:
    den = Denoiser.init(DEN_CFG, RandomSource(seed))
    enc = Encoder.init(ENC_CFG, RandomSource(seed + 1))
    return CheckpointBundle(
        denoiser_config=DEN_CFG,
        encoder_config=ENC_CFG,
        denoiser_params=den.params,
        encoder_params=enc.params,
        schedule=NoiseSchedule(),
        standardizer=Standardizer(np.array([0.1, -0.2]), np.array([1.5, 0.7])),
        steps=8,
        iteration=2,
        conditioning="step_end",
        provenance={"phase": "unit-test"},
    )


def test_round_trip_preserves_everything(tmp_path):
    path = str(tmp_path / "m.cddm")
    bundle = make_bundle()
    save_checkpoint(path, bundle)
    back = load_checkpoint(path)
    assert back.denoiser_config == DEN_CFG
    assert back.encoder_config == ENC_CFG
    assert back.denoiser_params.fingerprint() == bundle.denoiser_params.fingerprint()
    assert back.encoder_params.fingerprint() == bundle.encoder_params.fingerprint()
    assert back.schedule == NoiseSchedule()
    assert np.array_equal(back.standardizer.mean, bundle.standardizer.mean)
    assert np.array_equal(back.standardizer.std, bundle.standardizer.std)
    assert back.steps == 8
    assert back.iteration == 2
    assert back.conditioning == "step_end"
    assert back.provenance == {"phase": "unit-test"}
    assert all(t.requires_grad for _, t in back.denoiser_params.items())


def test_resave_is_bitwise_stable(tmp_path):
    p1 = str(tmp_path / "a.cddm")
    p2 = str(tmp_path / "b.cddm")
    save_checkpoint(p1, make_bundle())
    save_checkpoint(p2, load_checkpoint(p1))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_corrupted_payload_byte_rejected(tmp_path):
    path = tmp_path / "m.cddm"
    save_checkpoint(str(path), make_bundle())
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(str(path))


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.cddm"
    save_checkpoint(str(path), make_bundle())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.cddm"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(path))


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "m.cddm"
    save_checkpoint(str(path), make_bundle())
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(path))


def test_header_corruption_rejected(tmp_path):
    path = tmp_path / "m.cddm"
    save_checkpoint(str(path), make_bundle())
    raw = bytearray(path.read_bytes())
    raw[20] = 0xFF  # inside the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_error_messages_name_the_file(tmp_path):
    path = tmp_path / "named.cddm"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="named.cddm"):
        load_checkpoint(str(path))
