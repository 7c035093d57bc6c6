import numpy as np
import pytest

from hyperdense.analysis import export_heatmap, normalize_columns, read_heatmap, reuse_matrix
from hyperdense.network import PRESETS, ArchitectureSpec, build_network, tiny_spec, wire


def hyper_toy():
    return build_network(ArchitectureSpec("hyper_dense", 2, (2, 3, 2), (3,), 2), 0)


def test_hand_weighted_entries():
    net = hyper_toy()
    w = net.banks["s1L2"].weights  # sources [s1L1 (2 ch), s2L1 (2 ch)]
    w[:, :2] = -1.0
    w[:, 2:] = 3.0
    m = reuse_matrix(net)
    assert m.entry("s1L1", "s1L2", normalized=False) == pytest.approx(1.0)
    assert m.entry("s2L1", "s1L2", normalized=False) == pytest.approx(3.0)
    assert m.entry("s1L1", "s1L2") == pytest.approx(1 / 3)
    assert m.entry("s2L1", "s1L2") == pytest.approx(1.0)


def test_uniform_weights_normalize_to_one():
    net = hyper_toy()
    for b in net.banks.values():
        b.weights[...] = 0.7
    m = reuse_matrix(net)
    defined = ~np.isnan(m.normalized)
    np.testing.assert_allclose(m.normalized[defined], 1.0)


def block_slice(net, target, source):
    node = next(n for n in net.nodes if n.name == target)
    i = node.sources.index(source)
    a = sum(node.source_channels[:i])
    return slice(a, a + node.source_channels[i])


def test_zeroed_block_and_scaling():
    net = hyper_toy()
    before = reuse_matrix(net)
    net.banks["s2L3"].weights[:, block_slice(net, "s2L3", "s2L1")] = 0
    net.banks["s1L3"].weights[:, block_slice(net, "s1L3", "s1L2")] *= 2
    m = reuse_matrix(net)
    assert m.entry("s2L1", "s2L3", normalized=False) == 0.0
    assert m.entry("s2L1", "s2L3") == 0.0
    assert m.entry("s1L2", "s1L3", normalized=False) == pytest.approx(
        2 * before.entry("s1L2", "s1L3", normalized=False), rel=1e-12)
    assert m.entry("s2L2", "s1L3", normalized=False) == before.entry("s2L2", "s1L3", normalized=False)


def test_coverage_matches_wiring():
    for preset in ("hyperdense-2mod", "dual-path", "dual-single", "single-path"):
        spec = PRESETS[preset]
        net = build_network(ArchitectureSpec(spec.fusion_mode, spec.num_modalities, (1,) * 9, (2,), 2))
        expected = {(s, n.name) for n in wire(net.spec) if n.kind == "conv" for s in n.sources}
        assert reuse_matrix(net).edges() == expected


def test_hyperdense_dimensions_and_order():
    net = build_network(ArchitectureSpec("hyper_dense", 2, (1,) * 9, (2,), 2))
    m = reuse_matrix(net)
    assert m.raw.shape == (20, 18)
    assert m.sources[:3] == ["s1L0", "s1L1", "s1L2"]
    assert m.sources[10] == "s2L0"
    assert m.targets[0] == "s1L1" and m.targets[9] == "s2L1"
    assert np.isnan(m.entry("s1L5", "s2L3"))


def test_single_dense_same_path_only():
    net = build_network(ArchitectureSpec("single_dense", 2, (1,) * 9, (2,), 2))
    m = reuse_matrix(net)
    for src, _ in m.edges():
        assert src.startswith("s0L") or src in ("s1L0", "s2L0")


def test_normalize_columns_edge_cases():
    raw = np.array([[0.0, np.nan, 2.0], [0.0, np.nan, 4.0]])
    out = normalize_columns(raw)
    np.testing.assert_array_equal(out[:, 0], 0.0)
    assert np.all(np.isnan(out[:, 1]))
    np.testing.assert_allclose(out[:, 2], [0.5, 1.0])


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_heatmap_roundtrip(tmp_path, suffix):
    net = build_network(tiny_spec("dual_single"), 3)
    m = reuse_matrix(net)
    back = read_heatmap(export_heatmap(m, tmp_path / f"h{suffix}"))
    assert back.sources == m.sources and back.targets == m.targets
    np.testing.assert_allclose(back.normalized, m.normalized, atol=5e-7)
    assert np.array_equal(np.isnan(back.normalized), np.isnan(m.normalized))
    if suffix == ".json":
        np.testing.assert_allclose(back.raw, m.raw, atol=5e-7)
