import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promnet.data import (DEPTH_SCALE, FAMILIES, FormatError, GeneratorConfig, SequenceDataset, TrajectorySpec,
                          XorShift64Star, arc_geometry, area_downsample, generate_dataset, generate_trajectory,
                          import_frames, inspect_dataset, iter_windows, read_dataset, read_pgm,
                          render_sequence, write_dataset, write_pgm)


def reference_xorshift(seed, n):
    m = (1 << 64) - 1
    z = (seed + 0x9E3779B97F4A7C15) & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    x = (z ^ (z >> 31)) or 0x9E3779B97F4A7C15
    out = []
    for _ in range(n):
        x ^= x >> 12
        x = (x ^ (x << 25)) & m
        x ^= x >> 27
        out.append((x * 0x2545F4914F6CDD1D) & m)
    return out


@pytest.mark.parametrize("seed", [0, 1, 42, 2 ** 63])
def test_xorshift_matches_reference(seed):
    rng = XorShift64Star(seed)
    assert [rng.next_u64() for _ in range(5)] == reference_xorshift(seed, 5)


def test_uniform_range_and_shuffle_is_permutation():
    rng = XorShift64Star(3)
    u = [rng.uniform() for _ in range(1000)]
    assert 0 <= min(u) and max(u) < 1
    assert sorted(rng.shuffle(list(range(50)))) == list(range(50))


def test_straight_zero_jitter():
    poses = generate_trajectory(TrajectorySpec("straight", start=(0.0, 0.0), goal=(1.0, 0.0)), 5)
    assert [p[0] for p in poses] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert all(p[1] == 0.0 for p in poses)


@pytest.mark.parametrize("depth", ["near", "mid", "far"])
def test_arc_zero_jitter_lies_on_circle(depth):
    spec = TrajectorySpec("arc", depth)
    (cx, cy), r, _, _ = arc_geometry(spec.start, spec.goal, spec.bulge)
    poses = generate_trajectory(spec, 30)
    for x, y, s in poses:
        assert abs(math.hypot(x - cx, y - cy) - r) < 1e-9
        assert s == DEPTH_SCALE[depth]
    assert poses[0][:2] == pytest.approx(spec.start, abs=1e-12)
    assert poses[-1][:2] == pytest.approx(spec.goal, abs=1e-12)


def test_arc_bulges_upwards():
    spec = TrajectorySpec("arc", "mid")
    poses = generate_trajectory(spec, 21)
    # sagitta of 0.25 towards smaller y at the midpoint of a horizontal chord
    assert poses[10][1] == pytest.approx(spec.start[1] - spec.bulge, abs=1e-9)


@pytest.mark.parametrize("family", ["incline_lr", "incline_rl"])
def test_incline_zero_jitter_is_linear(family):
    spec = TrajectorySpec(family, "near")
    poses = np.array(generate_trajectory(spec, 11))[:, :2]
    expect = np.linspace(spec.start, spec.goal, 11)
    np.testing.assert_allclose(poses, expect, atol=1e-12)


def test_trajectory_seed_contract():
    spec = TrajectorySpec("arc", gain_noise=0.2, heading_noise=0.02, seed=9)
    assert generate_trajectory(spec, 20) == generate_trajectory(spec, 20)
    other = TrajectorySpec("arc", gain_noise=0.2, heading_noise=0.02, seed=10)
    assert generate_trajectory(other, 20) != generate_trajectory(spec, 20)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        generate_trajectory(TrajectorySpec(), 1)
    with pytest.raises(ValueError):
        TrajectorySpec(gain_noise=-0.1)
    with pytest.raises(ValueError):
        TrajectorySpec(goal=(1.5, 0.5))
    with pytest.raises(ValueError):
        TrajectorySpec(family="zigzag")


def test_render_empty_and_offscreen():
    assert render_sequence([], 16, 16).shape == (0, 16, 16)
    bg = np.random.default_rng(0).random((16, 16))
    frames = render_sequence([(5.0, 5.0, 1.0), (-3.0, 0.5, 1.0)], 16, 16, background=bg)
    np.testing.assert_array_equal(frames[0], bg)
    np.testing.assert_array_equal(frames[1], bg)


def test_render_moving_sprite_changes_pixels():
    poses = generate_trajectory(TrajectorySpec("straight"), 10)
    frames = render_sequence(poses, 64, 64)
    assert all(np.any(frames[t] != frames[t + 1]) for t in range(9))


def test_render_requires_multiple_of_eight():
    with pytest.raises(ValueError):
        render_sequence([(0.5, 0.5, 1.0)], 20, 20)


def test_render_antialiased_coverage_conserves_area():
    # sprite mass above a black background equals covered area times intensities
    frame = render_sequence([(0.5, 0.5, 1.0)], 32, 32, background=np.zeros((32, 32)))[0]
    assert frame.sum() == pytest.approx(9 * 6 * (0.7 * 0.9 + 0.3 * 0.45), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(x=st.floats(-0.5, 1.5), y=st.floats(-0.5, 1.5), depth=st.sampled_from(list(DEPTH_SCALE)))
def test_render_values_in_unit_range(x, y, depth):
    f = render_sequence([(x, y, DEPTH_SCALE[depth])], 16, 16)
    assert f.min() >= 0 and f.max() <= 1


def test_default_dataset_counts_and_split():
    ds = generate_dataset(GeneratorConfig(length=4, size=16))
    assert len(ds) == 80
    assert len(ds.indices("train")) == 60 and len(ds.indices("test")) == 20
    for fam in FAMILIES:
        assert len(ds.indices(families=[fam])) == 20


def test_per_family_count_and_duplicate():
    ds = generate_dataset(GeneratorConfig(families=("straight",), count=5, length=4, size=16))
    assert len(ds) == 5
    dup = generate_dataset(GeneratorConfig(families=("straight",), count=5, length=4, size=16, duplicate=True))
    assert len(dup) == 10
    np.testing.assert_array_equal(dup.frames[0], dup.frames[1])
    assert dup.metadata[0]["split"] == dup.metadata[1]["split"]


def test_holdout_family_is_test_only():
    ds = generate_dataset(GeneratorConfig(count=3, length=4, size=16, holdout=("arc",)))
    assert {ds.metadata[i]["family"] for i in ds.indices("test")} == {"arc"}
    assert len(ds.indices("train")) == 9


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2 ** 32), count=st.integers(1, 6))
def test_split_disjoint_and_exhaustive(seed, count):
    ds = generate_dataset(GeneratorConfig(count=count, length=3, size=8, base_seed=seed, textured=False))
    train, test = set(ds.indices("train")), set(ds.indices("test"))
    assert not train & test and train | test == set(range(len(ds)))
    assert ds.frames.dtype == np.uint8


def test_dataset_bytes_reproducible(tmp_path):
    cfg = GeneratorConfig(count=2, length=5, size=16, base_seed=7)
    write_dataset(generate_dataset(cfg), tmp_path / "a.prds")
    write_dataset(generate_dataset(cfg), tmp_path / "b.prds")
    assert (tmp_path / "a.prds").read_bytes() == (tmp_path / "b.prds").read_bytes()


def test_dataset_roundtrip_and_inspect(tmp_path):
    ds = generate_dataset(GeneratorConfig(count=2, length=5, size=16, base_seed=1))
    path = tmp_path / "d.prds"
    write_dataset(ds, path)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.frames, ds.frames)
    assert back.metadata == ds.metadata
    assert inspect_dataset(path) == (8, 5, 16, 16)


def test_inspect_reads_header_only(tmp_path):
    ds = generate_dataset(GeneratorConfig(count=1, length=3, size=8, families=("arc",)))
    path = tmp_path / "d.prds"
    write_dataset(ds, path)
    data = path.read_bytes()
    # header survives even when everything after it is gone
    (tmp_path / "h.prds").write_bytes(data[:25])
    assert inspect_dataset(tmp_path / "h.prds") == (1, 3, 8, 8)
    header = struct.unpack_from("<4sIIIIIB", data)
    assert header[0] == b"PRDS" and header[1] == 1 and header[6] == 0


def test_dataset_corruption_errors(tmp_path):
    ds = generate_dataset(GeneratorConfig(count=1, length=3, size=8, families=("straight",)))
    path = tmp_path / "d.prds"
    write_dataset(ds, path)
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="CRC32 mismatch over header/metadata/frame payload"):
        read_dataset(path)
    path.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)
    path.write_bytes(bytes(data[:40]))
    with pytest.raises(FormatError, match="truncated"):
        read_dataset(path)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        SequenceDataset(np.zeros((2, 3, 8, 8), np.uint8), [{}])
    with pytest.raises(ValueError):
        SequenceDataset(np.zeros((1, 3, 8, 8), np.float32), [{}])


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (12, 20), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_comment_and_16bit(tmp_path):
    raw = np.array([[0, 65535]], dtype=">u2")
    (tmp_path / "b.pgm").write_bytes(b"P5\n# note\n2 1\n65535\n" + raw.tobytes())
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), [[0, 255]])


def test_non_p5_rejected(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(FormatError, match="unsupported"):
        read_pgm(tmp_path / "c.pgm")


def test_import_white_frames(tmp_path):
    for k in range(3):
        write_pgm(tmp_path / f"f{k:02d}.pgm", np.full((128, 128), 255, np.uint8))
    frames = import_frames(tmp_path)
    assert frames.shape == (3, 64, 64)
    assert np.all(frames == 1.0)


def test_area_average_half():
    block = np.array([[0, 0], [255, 255]], dtype=np.uint8)
    assert area_downsample(block, 1, 1)[0, 0] / 255.0 == 0.5


def test_area_downsample_non_integer_ratio_preserves_mean():
    img = np.random.default_rng(1).random((30, 45))
    out = area_downsample(img, 8, 8)
    assert out.mean() == pytest.approx(img.mean(), rel=1e-12)


def test_import_mixed_sizes_and_stride(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((64, 64), np.uint8))
    write_pgm(tmp_path / "b.pgm", np.zeros((32, 32), np.uint8))
    with pytest.raises(FormatError, match="differs"):
        import_frames(tmp_path)
    assert import_frames(tmp_path, stride=2).shape == (1, 64, 64)


def test_windows():
    assert list(iter_windows(30, 10, 10)) == list(range(11))
    assert list(iter_windows(30, 10, 10, stride=5)) == [0, 5, 10]
    with pytest.raises(ValueError):
        list(iter_windows(19, 10, 10))
