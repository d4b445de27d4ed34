import numpy as np
import orjson
import pytest

from dosediff.core.errors import FormatError
from dosediff.infrastructure.volume_store import export_pgm, read_volume, volume_paths, write_volume
from dosediff.services.phantom_service import degrade_counts


def _rewrite_header(header_path, **changes):
    header = orjson.loads(header_path.read_bytes())
    header.update(changes)
    header_path.write_bytes(orjson.dumps(header))


class TestRoundTrip:
    def test_write_read_write_is_byte_identical(self, phantom, tmp_path):
        noisy = degrade_counts(phantom, 0.05, 2)
        header_a, payload_a = write_volume(noisy, tmp_path / "a")
        back = read_volume(tmp_path / "a")
        header_b, payload_b = write_volume(back, tmp_path / "b")
        assert payload_a.read_bytes() == payload_b.read_bytes()
        assert header_a.read_bytes() == header_b.read_bytes()
        assert back.voxel_size_mm == noisy.voxel_size_mm
        assert back.count_fraction == noisy.count_fraction
        assert np.allclose(back.data, noisy.data, rtol=1e-6)

    def test_header_stores_voxel_size_x_first(self, phantom, tmp_path):
        header_path, _ = write_volume(phantom, tmp_path / "p")
        header = orjson.loads(header_path.read_bytes())
        assert header["voxel_size_mm"] == list(reversed(phantom.voxel_size_mm))
        assert (header["slices"], header["height"], header["width"]) == phantom.shape

    def test_either_suffix_names_the_volume(self, tmp_path):
        assert volume_paths(tmp_path / "v.vol.raw") == volume_paths(tmp_path / "v.vol.json") == volume_paths(tmp_path / "v")


class TestRejects:
    def test_truncated_payload(self, phantom, tmp_path):
        _, payload = write_volume(phantom, tmp_path / "p")
        raw = payload.read_bytes()
        payload.write_bytes(raw[:-10])
        with pytest.raises(FormatError) as info:
            read_volume(tmp_path / "p")
        assert info.value.details["expected"] == len(raw)
        assert info.value.details["actual"] == len(raw) - 10

    def test_zero_slices(self, phantom, tmp_path):
        header, _ = write_volume(phantom, tmp_path / "p")
        _rewrite_header(header, slices=0)
        with pytest.raises(FormatError):
            read_volume(tmp_path / "p")

    def test_non_finite_payload(self, phantom, tmp_path):
        _, payload = write_volume(phantom, tmp_path / "p")
        data = np.frombuffer(payload.read_bytes(), dtype="<f4").copy()
        data[17] = np.nan
        payload.write_bytes(data.tobytes())
        with pytest.raises(FormatError) as info:
            read_volume(tmp_path / "p")
        assert info.value.details["offset"] == 17 * 4

    def test_negative_payload(self, phantom, tmp_path):
        _, payload = write_volume(phantom, tmp_path / "p")
        data = np.frombuffer(payload.read_bytes(), dtype="<f4").copy()
        data[3] = -1.0
        payload.write_bytes(data.tobytes())
        with pytest.raises(FormatError):
            read_volume(tmp_path / "p")

    def test_missing_key(self, phantom, tmp_path):
        header, _ = write_volume(phantom, tmp_path / "p")
        body = orjson.loads(header.read_bytes())
        del body["dose_bq"]
        header.write_bytes(orjson.dumps(body))
        with pytest.raises(FormatError):
            read_volume(tmp_path / "p")

    def test_non_square_slices(self, phantom, tmp_path):
        header, _ = write_volume(phantom, tmp_path / "p")
        _rewrite_header(header, height=phantom.height * 2)
        with pytest.raises(FormatError):
            read_volume(tmp_path / "p")

    def test_invalid_metadata(self, phantom, tmp_path):
        header, _ = write_volume(phantom, tmp_path / "p")
        _rewrite_header(header, count_fraction=1.5)
        with pytest.raises(FormatError):
            read_volume(tmp_path / "p")

    def test_missing_payload(self, phantom, tmp_path):
        _, payload = write_volume(phantom, tmp_path / "p")
        payload.unlink()
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "p")


class TestPgm:
    def test_one_graymap_per_slice(self, phantom, tmp_path):
        paths = export_pgm(phantom, tmp_path / "pgm")
        assert len(paths) == phantom.slices
        assert paths[0].name == "slice_00.pgm"
        blob = paths[6].read_bytes()
        header = f"P5\n{phantom.width} {phantom.height}\n255\n".encode("ascii")
        assert blob.startswith(header)
        assert len(blob) == len(header) + phantom.width * phantom.height

    def test_window_maps_to_full_range(self, phantom, tmp_path):
        paths = export_pgm(phantom, tmp_path, window=(0.0, float(phantom.data.max())))
        pixels = [np.frombuffer(p.read_bytes()[-phantom.width * phantom.height :], dtype=np.uint8) for p in paths]
        assert max(int(px.max()) for px in pixels) == 255
        assert int(pixels[0].max()) == 0
