import json

import numpy as np
import pytest

from hyperdense.fileio import (
    ManifestEntry,
    load_checkpoint,
    load_manifest,
    load_subject,
    parse_run_config,
    read_volume,
    save_checkpoint,
    save_manifest,
    write_volume,
)
from hyperdense.network import ArchitectureSpec, build_network, forward, tiny_spec
from hyperdense.synth import class_intensities, synth_dataset
from hyperdense.trainer import OptimizerState


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 5, 6)).astype(np.float32)
    p = write_volume(tmp_path / "a.raw", v, (0.96, 0.96, 3.0))
    back = read_volume(p)
    np.testing.assert_array_equal(back.data, v)
    assert back.spacing == (0.96, 0.96, 3.0)
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta == {"dims": [4, 5, 6], "spacing_mm": [0.96, 0.96, 3.0], "dtype": "f32",
                    "channels": 1, "byte_order": "little"}
    assert (tmp_path / "a.raw").stat().st_size == 4 * 5 * 6 * 4


def test_volume_layout_w_fastest(tmp_path):
    v = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_volume(tmp_path / "b.raw", v)
    assert list((tmp_path / "b.raw").read_bytes()) == list(range(24))


def test_multichannel_and_labels(tmp_path):
    probs = np.random.default_rng(1).random((3, 4, 4, 4)).astype(np.float32)
    back = read_volume(write_volume(tmp_path / "p.raw", probs))
    assert back.channels == 3
    np.testing.assert_array_equal(back.data, probs)
    lab = np.random.default_rng(2).integers(0, 4, (5, 5, 5))
    back = read_volume(write_volume(tmp_path / "l.raw", lab))
    assert back.data.dtype == np.uint8
    np.testing.assert_array_equal(back.data, lab)
    with pytest.raises(ValueError):
        write_volume(tmp_path / "bad.raw", lab - 1)


def test_truncated_payload(tmp_path):
    p = write_volume(tmp_path / "t.raw", np.zeros((4, 4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="expected 256 bytes, got 253"):
        read_volume(p)


def test_missing_sidecar(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"\0" * 8)
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "x.raw")


def test_manifest_relative_paths(tmp_path):
    write_volume(tmp_path / "d/m1.raw", np.zeros((3, 3, 3), np.float32))
    write_volume(tmp_path / "d/lab.raw", np.ones((3, 3, 3), np.uint8))
    entries = [ManifestEntry("s1", {"t1": str(tmp_path / "d/m1.raw")}, str(tmp_path / "d/lab.raw"), "val")]
    save_manifest(entries, tmp_path / "d/manifest.json")
    raw = json.loads((tmp_path / "d/manifest.json").read_text())
    assert raw[0]["modality_paths"] == {"t1": "m1.raw"}
    back = load_manifest(tmp_path / "d/manifest.json")
    assert back[0].split == "val"
    subj = load_subject(back[0])
    assert subj.labels.sum() == 27
    with pytest.raises(ValueError, match="missing modality 't2'"):
        load_subject(back[0], ["t1", "t2"])


def test_run_config_fail_closed():
    cfg = parse_run_config({"arch": "reduced-hyperdense", "train": {"epochs": 2}, "precision": "double"})
    assert cfg.train.epochs == 2 and cfg.dtype == np.float64
    assert cfg.sampler.patch_size == 27
    for bad in ({"archh": "x"}, {"train": {"lr": 1}}, {"sampler": {"kind": "x"}},
                {"arch": {"fusion_mode": "hyper_dense", "extra": 1}}, {"precision": "half"}):
        with pytest.raises(ValueError):
            parse_run_config(bad)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_fidelity(tmp_path, dtype):
    spec = ArchitectureSpec("dual_single", 2, (2, 2, 3), (4,), 3, dropout_rate=0.1)
    net = build_network(spec, 4, dtype)
    params = net.parameters()
    state = OptimizerState.zeros_like(params, lr=0.01)
    for k in params:
        state.r[k] += 0.5
        state.v[k] -= 0.25
    rng_state = np.random.default_rng(3).bit_generator.state
    save_checkpoint(tmp_path / "ck", net, state, 7, rng_state, ["a", "b"])
    save_checkpoint(tmp_path / "ck", net, state, 7, rng_state, ["a", "b"])  # overwrite in place
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.epoch == 7 and ck.modalities == ["a", "b"] and ck.net.spec == spec
    assert ck.net.dtype == dtype
    for k, v in params.items():
        np.testing.assert_array_equal(ck.net.parameters()[k], v)
        np.testing.assert_array_equal(ck.state.r[k], state.r[k])
    g = np.random.default_rng(0)
    g.bit_generator.state = ck.rng_state
    assert g.random() == np.random.default_rng(3).random()
    x = [np.random.default_rng(5).normal(size=(1, 1, 9, 9, 9)).astype(dtype) for _ in range(2)]
    np.testing.assert_array_equal(forward(ck.net, x), forward(net, x))


def test_checkpoint_version_check(tmp_path):
    p = save_checkpoint(tmp_path / "ck", build_network(tiny_spec(), 0))
    idx = json.loads((p / "index.json").read_text())
    idx["format_version"] = 99
    (p / "index.json").write_text(json.dumps(idx))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(p)


def test_synth_deterministic_and_complete(tmp_path):
    spec = {"subjects": 2, "dims": 24, "classes": 4, "modalities": 2, "noise_sigma": 0.05, "seed": 3}
    a = synth_dataset(spec, tmp_path / "a")
    synth_dataset(spec, tmp_path / "b")
    for name in ("subject01_mod1.raw", "subject02_mod2.raw", "subject02_label.raw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(a) == 2
    for e in load_manifest(tmp_path / "a/manifest.json"):
        labels = read_volume(e.label_path).data
        assert set(np.unique(labels)) == {0, 1, 2, 3}


def test_synth_zero_noise_intensities(tmp_path):
    spec = {"subjects": 1, "dims": [20, 22, 24], "classes": 4, "modalities": 3, "noise_sigma": 0.0,
            "seed": 1, "spacing_mm": [1.0, 1.0, 2.0]}
    e = synth_dataset(spec, tmp_path)[0]
    table = class_intensities(4, 3, 1)
    labels = read_volume(e.label_path).data
    for m in range(3):
        v = read_volume(e.modality_paths[f"mod{m + 1}"])
        assert v.spacing == (1.0, 1.0, 2.0) and v.data.shape == (20, 22, 24)
        np.testing.assert_array_equal(v.data, table[m][labels].astype(np.float32))
    assert len({tuple(table[:, c]) for c in range(4)}) == 4


def test_synth_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError):
        synth_dataset({"subjects": 1, "size": 3}, tmp_path)
