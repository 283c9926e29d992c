import struct

import numpy as np
import pytest

from densal.formats import (
    NODATA,
    FormatError,
    SceneManifest,
    read_manifest,
    read_pgrd,
    read_pgrd_header,
    read_trees_csv,
    tree_digest,
    write_manifest,
    write_pgrd,
    write_trees_csv,
)
from densal.raster import GeoTransform, RasterGrid, TreeAnnotationSet


def sample_grid(rng, bands=3, h=5, w=7, mask=None):
    return RasterGrid(rng.random((bands, h, w)).astype(np.float32).astype(float), GeoTransform(500.0, 900.0, 10.0), mask)


class TestPgrd:
    def test_roundtrip(self, tmp_path, rng):
        g = sample_grid(rng)
        write_pgrd(tmp_path / "a.pgrd", g)
        back = read_pgrd(tmp_path / "a.pgrd")
        assert np.array_equal(back.values, g.values)
        assert back.geotransform == g.geotransform
        assert not back.nodata_mask.any()

    def test_header_layout(self, tmp_path, rng):
        write_pgrd(tmp_path / "a.pgrd", sample_grid(rng))
        data = (tmp_path / "a.pgrd").read_bytes()
        magic, version, w, h, bands, dtype, ox, oy, ps, nodata = struct.unpack_from("<4sHIIHB3df", data)
        assert (magic, version, w, h, bands, dtype) == (b"PGRD", 1, 7, 5, 3, 0)
        assert (ox, oy, ps, nodata) == (500.0, 900.0, 10.0, NODATA)
        assert len(data) == struct.calcsize("<4sHIIHB3df") + 4 * 3 * 5 * 7
        assert read_pgrd_header(tmp_path / "a.pgrd") == ((7, 5, 3), (500.0, 900.0, 10.0))

    def test_nodata_roundtrip(self, tmp_path, rng):
        mask = np.zeros((5, 7), bool)
        mask[2, 3] = True
        write_pgrd(tmp_path / "a.pgrd", sample_grid(rng, mask=mask))
        back = read_pgrd(tmp_path / "a.pgrd")
        assert np.array_equal(back.nodata_mask, mask)

    def test_bad_magic(self, tmp_path, rng):
        write_pgrd(tmp_path / "a.pgrd", sample_grid(rng))
        f = tmp_path / "a.pgrd"
        f.write_bytes(b"XXXX" + f.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            read_pgrd(f)

    def test_truncated(self, tmp_path, rng):
        write_pgrd(tmp_path / "a.pgrd", sample_grid(rng))
        f = tmp_path / "a.pgrd"
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(FormatError, match="payload"):
            read_pgrd(f)
        f.write_bytes(b"PG")
        with pytest.raises(FormatError):
            read_pgrd(f)


class TestTreesCsv:
    def test_roundtrip(self, tmp_path, rng):
        sets = [
            TreeAnnotationSet(rng.uniform(0, 100, (4, 2)), (0, 0, 100, 100), "a"),
            TreeAnnotationSet(np.zeros((0, 2)), (100, 0, 200, 100), "b"),
        ]
        write_trees_csv(tmp_path / "t.csv", sets)
        back = read_trees_csv(tmp_path / "t.csv", {"a": (0, 0, 100, 100), "b": (100, 0, 200, 100)})
        assert np.array_equal(back["a"].points, sets[0].points)
        assert len(back["b"].points) == 0

    def test_bad_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("id,x,y\n")
        with pytest.raises(FormatError, match="header"):
            read_trees_csv(tmp_path / "t.csv", {})

    def test_missing_bounds(self, tmp_path):
        (tmp_path / "t.csv").write_text("block_id,x_m,y_m\nz,1.0,2.0\n")
        with pytest.raises(FormatError, match="no bounds"):
            read_trees_csv(tmp_path / "t.csv", {})


class TestManifest:
    def test_roundtrip_and_validate(self, tmp_path, rng):
        write_pgrd(tmp_path / "i.pgrd", sample_grid(rng))
        write_pgrd(tmp_path / "c.pgrd", sample_grid(rng, bands=1))
        s = SceneManifest("s1", ["2019-01-01"], ["i.pgrd"], ["c.pgrd"], meta={"k": 1})
        write_manifest(tmp_path / "m.json", [s], {"seed": 4})
        scenes, extra = read_manifest(tmp_path / "m.json")
        assert scenes == [s] and extra == {"seed": 4}
        scenes[0].validate(tmp_path)

    def test_validate_missing_file(self, tmp_path):
        s = SceneManifest("s1", ["t"], ["i.pgrd"], ["c.pgrd"])
        with pytest.raises(FormatError, match="missing"):
            s.validate(tmp_path)

    def test_validate_geotransform_mismatch(self, tmp_path, rng):
        write_pgrd(tmp_path / "i.pgrd", sample_grid(rng))
        write_pgrd(tmp_path / "c.pgrd", RasterGrid(np.zeros((1, 5, 7)), GeoTransform(0, 0, 10)))
        with pytest.raises(FormatError, match="geotransform"):
            SceneManifest("s1", ["t"], ["i.pgrd"], ["c.pgrd"]).validate(tmp_path)

    def test_validate_length_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            SceneManifest("s1", ["t", "u"], ["i.pgrd"], ["c.pgrd"]).validate(tmp_path)


def test_digest_sensitive_to_content_and_names(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.bin").write_bytes(b"123")
    d1 = tree_digest(tmp_path)
    assert tree_digest(tmp_path) == d1
    (tmp_path / "a" / "x.bin").write_bytes(b"124")
    assert tree_digest(tmp_path) != d1
    (tmp_path / "a" / "x.bin").write_bytes(b"123")
    (tmp_path / "a" / "x.bin").rename(tmp_path / "a" / "y.bin")
    assert tree_digest(tmp_path) != d1
