import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odfkit.errors import ParseError
from odfkit.features import ODFField, odf_cloud
from odfkit.geometry import PointCloud, build_knn_index, icosphere_directions
from odfkit.io import (SyntheticDatasetSpec, decode_odf, encode_odf, export_glyphs,
                       generate_synthetic_dataset, glyph_segments, read_odf, read_point_cloud,
                       write_odf, write_point_cloud)
from odfkit.io.clouds import parse_off, parse_ply_ascii, parse_xyz
from odfkit.io.synthetic import generate_sample
from odfkit.net.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from odfkit.net.model import forward, init_net, prepare_input

from conftest import random_cloud, tiny_bank, tiny_config
from corpus import checkpoint_corpus, odf_corpus, sample_checkpoint_bytes, sample_odf_bytes


def seed5_field(bank42):
    return odf_cloud(random_cloud(5, 64), bank42, "ri_xyz")


class TestTextClouds:
    def test_xyz_two_points(self):
        c = parse_xyz("0 0 0\n1 0 0\n")
        assert len(c) == 2 and c.colors is None

    def test_xyz_with_colors_and_whitespace(self):
        c = parse_xyz("  0\t0 0  0.5 0.5 1\n\n1 0 0 0 0 0 # tail\n")
        np.testing.assert_array_equal(c.colors, [[0.5, 0.5, 1], [0, 0, 0]])

    @pytest.mark.parametrize("text,line", [("0 0\n", 1), ("0 0 0\n1 x 0\n", 2),
                                           ("0 0 0 1 1 1\n0 0 0\n", 2), ("", 1)])
    def test_xyz_errors(self, text, line):
        with pytest.raises(ParseError) as err:
            parse_xyz(text)
        assert err.value.position == line

    def test_off_missing_vertex_line(self):
        text = "OFF\n8 0 0\n" + "0 0 0\n" * 7
        with pytest.raises(ParseError) as err:
            parse_off(text)
        assert err.value.position == 10

    def test_off_glued_header_and_faces(self):
        c = parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        assert len(c) == 3

    @pytest.mark.parametrize("text,line", [
        ("OFX\n1 0 0\n0 0 0\n", 1),
        ("OFF\n1 0\n0 0 0\n", 2),
        ("OFF\n1 1 0\n0 0 0\n3 0 1 2\n", 4),
        ("OFF\n1 0 0\n0 0 0\n5 5 5\n", 4),
        ("OFF\n1 1 0\n0 0 0\n", 4),
    ])
    def test_off_errors(self, text, line):
        with pytest.raises(ParseError) as err:
            parse_off(text)
        assert err.value.position == line

    def test_ply_colors(self):
        text = ("ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\n"
                "property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
                "property uchar blue\nelement face 1\nproperty list uchar int vertex_indices\n"
                "end_header\n0 0 0 255 0 51\n1 2 3 0 255 0\n3 0 1 1\n")
        c = parse_ply_ascii(text)
        np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 2, 3]])
        np.testing.assert_allclose(c.colors, [[1, 0, 0.2], [0, 1, 0]])

    def test_ply_binary_rejected(self, tmp_path):
        p = tmp_path / "b.ply"
        p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                      b"property float x\nproperty float y\nproperty float z\nend_header\n\x00\x80\xff")
        with pytest.raises(ParseError):
            read_point_cloud(p)
        with pytest.raises(ParseError) as err:
            parse_ply_ascii(p.read_bytes()[:-3].decode())
        assert err.value.position == 2

    @pytest.mark.parametrize("fmt,suffix", [("xyz", ".xyz"), ("off", ".off"), ("ply_ascii", ".ply")])
    def test_round_trip_exact(self, tmp_path, fmt, suffix):
        rng = np.random.default_rng(0)
        colors = rng.uniform(size=(256, 3)) if fmt != "off" else None
        cloud = PointCloud(rng.normal(size=(256, 3)) * 10 ** rng.uniform(-5, 5, size=(256, 1)),
                           colors)
        path = tmp_path / f"c{suffix}"
        write_point_cloud(path, cloud)
        back = read_point_cloud(path)
        assert back.points.tobytes() == cloud.points.tobytes()
        if colors is not None:
            assert back.colors.tobytes() == colors.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(allow_nan=False, allow_infinity=False, width=64)] * 3),
                    min_size=1, max_size=20))
    def test_xyz_round_trip_property(self, pts):
        from odfkit.io.clouds import format_point_cloud
        cloud = PointCloud(np.array(pts, dtype=np.float64))
        back = parse_xyz(format_point_cloud(cloud, "xyz"))
        np.testing.assert_array_equal(back.points, cloud.points)


class TestOdfFile:
    def test_round_trip_bytes(self, tmp_path, bank42):
        field = seed5_field(bank42)
        data = encode_odf(field)
        write_odf(tmp_path / "a.odf", field)
        back = read_odf(tmp_path / "a.odf")
        assert encode_odf(back) == data == (tmp_path / "a.odf").read_bytes()
        assert back.values.tobytes() == field.values.tobytes()
        assert back.alignment == "ri_xyz"

    def test_seed5_golden_digest(self, bank42):
        data = encode_odf(seed5_field(bank42))
        assert len(data) == 24 + 4 * 64 * 42 * 8
        assert hashlib.sha256(data).hexdigest() == SEED5_SHA256

    def test_header_of_default_field(self, bank42):
        data = encode_odf(seed5_field(bank42))
        assert np.frombuffer(data[8:20], "<u4").tolist() == [64, 42, 8]
        assert data[:4] == b"ODF1" and data[20] == 2

    def test_empty_field_rejected(self):
        with pytest.raises(ValueError):
            encode_odf(ODFField(np.zeros((0, 42, 8), np.float32)))

    def test_corpus_rejected_with_position(self):
        cases = odf_corpus()
        assert len(cases) >= 50
        for name, data in cases:
            with pytest.raises(ParseError) as err:
                decode_odf(data)
            assert err.value.kind == "byte" and err.value.position is not None, name


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        data = sample_checkpoint_bytes()
        net, meta = decode_checkpoint(data)
        assert meta == {"note": "fuzz"}
        assert encode_checkpoint(net, meta) == data
        save_checkpoint(tmp_path / "m.ckpt", net, meta)
        assert (tmp_path / "m.ckpt").read_bytes() == data

    @pytest.mark.parametrize("mode", ["standard", "xyz"])
    def test_logits_survive_float32_round_trip(self, mode, tmp_path):
        cfg = tiny_config(mode)
        net = init_net(cfg, 3, bias_scale=0.1)
        for _, arr in net.named_parameters():
            arr[...] = arr.astype(np.float32)
        save_checkpoint(tmp_path / "m", net, {})
        back, _ = load_checkpoint(tmp_path / "m")
        inp = prepare_input(random_cloud(0, 40), cfg, tiny_bank())
        assert forward(net, inp)[0].tobytes() == forward(back, inp)[0].tobytes()
        assert back.config == net.config

    def test_corpus_rejected_with_position(self):
        cases = checkpoint_corpus()
        assert len(cases) >= 50
        for name, data in cases:
            with pytest.raises(ParseError) as err:
                decode_checkpoint(data, "m.ckpt")
            assert err.value.kind == "byte" and err.value.position is not None, name
            assert str(err.value).startswith("m.ckpt: byte ")


class TestSynthetic:
    def test_split_and_balance(self):
        ds = generate_synthetic_dataset(SyntheticDatasetSpec(points=64))
        assert len(ds.train) == 320 and len(ds.test) == 80
        assert np.bincount([c.label for c in ds.test]).tolist() == [20] * 4

    def test_deterministic_bytes(self):
        spec = SyntheticDatasetSpec(samples_per_class=3, points=128, seed=11)
        a = generate_synthetic_dataset(spec)
        b = generate_synthetic_dataset(spec)
        assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a.clouds, b.clouds))

    def test_sample_order_independent(self):
        spec = SyntheticDatasetSpec(samples_per_class=4, points=64)
        ds = generate_synthetic_dataset(spec)
        assert generate_sample(spec, 2, 3).points.tobytes() == ds.clouds[2 * 4 + 3].points.tobytes()

    @pytest.mark.parametrize("noise", [0.0, 0.01, 0.05])
    def test_sphere_norms(self, noise):
        spec = SyntheticDatasetSpec(samples_per_class=5, points=256, noise=noise)
        for i in range(5):
            r = np.linalg.norm(generate_sample(spec, 0, i).points, axis=1)
            assert r.max() <= 1 + 1e-12 and r.min() >= 1 - 4 * noise - 1e-12

    def test_normalized(self):
        for c in generate_synthetic_dataset(SyntheticDatasetSpec(samples_per_class=2)).clouds:
            assert abs(np.linalg.norm(c.points, axis=1).max() - 1) < 1e-9
            assert np.abs(c.points.mean(axis=0)).max() < 1e-9

    def test_pinned_generator(self):
        # PCG64 seeded with seed ^ index; the first coordinate is a golden value.
        c = generate_sample(SyntheticDatasetSpec(), 1, 0)
        assert c.points[0].tolist() == SYNTH_BOX0_POINT0

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(classes=("sphere", "torus"))


class TestGlyphs:
    def test_zero_field(self, tmp_path):
        cloud = random_cloud(0, 10)
        n = export_glyphs(cloud, np.zeros((10, 42, 8)), [0, 3], tmp_path / "g.obj",
                          icosphere_directions(1))
        text = (tmp_path / "g.obj").read_text()
        assert n == 0 and "# scale 0.1" in text
        assert not any(line.startswith(("v ", "l ")) for line in text.splitlines())

    def test_collinear_tip_points_along_axis(self, bank42):
        pts = np.zeros((40, 3))
        pts[:, 2] = np.arange(40) * 0.1
        pts[:, :2] = np.random.default_rng(0).normal(size=(40, 2)) * 1e-3
        cloud = PointCloud(pts)
        field = odf_cloud(cloud, bank42)
        segs = glyph_segments(cloud, field.values, [0], bank42.direction_set)
        longest = max(segs, key=lambda s: np.linalg.norm(s[3] - s[2]))
        direction = (longest[3] - longest[2]) / np.linalg.norm(longest[3] - longest[2])
        assert direction[2] > 0.8

    def test_count_matches_nonzero_directions(self, tmp_path, bank42):
        field = seed5_field(bank42)
        sel = [0, 5, 17, 63]
        expected = int((field.values[sel].max(axis=-1) > 0).sum())
        n = export_glyphs(random_cloud(5, 64), field.values, sel, tmp_path / "g.obj",
                          bank42.direction_set, field.frames)
        lines = (tmp_path / "g.obj").read_text().splitlines()
        assert n == expected
        assert sum(l.startswith("l ") for l in lines) == n
        assert sum(l.startswith("v ") for l in lines) == 2 * n

    def test_lengths_scaled_by_point_max(self, bank42):
        field = seed5_field(bank42)
        cloud = random_cloud(5, 64)
        segs = glyph_segments(cloud, field.values, [7], bank42.direction_set, field.frames, 0.5)
        lengths = [np.linalg.norm(b - a) for _, _, a, b in segs]
        assert max(lengths) == pytest.approx(0.5, rel=1e-12)

    def test_out_of_range(self, tmp_path):
        with pytest.raises(IndexError):
            export_glyphs(random_cloud(0, 5), np.ones((5, 12, 2)), [5], tmp_path / "g.obj",
                          icosphere_directions(0))


SEED5_SHA256 = "b8ccd2f8129913f38c4d187138d23cd85cb51643ba270002bb14ca3f344e19a8"
SYNTH_BOX0_POINT0 = [-0.034265539798666735, -0.440624015056692, -0.0219516306158492]
