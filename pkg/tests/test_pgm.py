import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccv.harness.pgm import PgmError, decode_pgm, encode_pgm, read_pgm, write_pgm
from ccv.synthetic import render_pair, sample_task


class TestDecode:
    def test_extreme_bytes(self):
        img = decode_pgm(b"P5\n2 1\n255\n" + bytes([0, 255]))
        assert img.shape == (1, 1, 2)
        assert img[0, 0, 0] == 0.0
        assert img[0, 0, 1] == 1.0

    def test_comments_and_whitespace_in_header(self):
        buf = b"P5 # a comment\n3\t# width\n 2\n255\n" + bytes(range(6))
        img = decode_pgm(buf)
        assert img.shape == (1, 2, 3)
        np.testing.assert_array_equal(img.ravel() * 255, np.arange(6, dtype=np.float32))

    def test_ascii_pgm_rejected(self):
        with pytest.raises(PgmError, match="unsupported format"):
            decode_pgm(b"P2\n1 1\n255\n0\n")

    def test_sixteen_bit_rejected(self):
        with pytest.raises(PgmError, match="unsupported depth"):
            decode_pgm(b"P5\n1 1\n65535\n\x00\x00")

    def test_short_payload(self):
        with pytest.raises(PgmError, match="corrupt file"):
            decode_pgm(b"P5\n4 4\n255\n" + bytes(10))

    def test_truncated_header(self):
        with pytest.raises(PgmError, match="corrupt file"):
            decode_pgm(b"P5\n4 ")


class TestEncode:
    def test_round_half_up(self):
        # 0.5/255 sits exactly on a rounding boundary
        vals = np.array([[[0.5 / 255, 1.5 / 255, 0.49 / 255, 1.0]]])
        raw = encode_pgm(vals)
        assert list(raw[-4:]) == [1, 2, 0, 255]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            encode_pgm(np.array([[[1.2]]]))

    def test_multichannel_rejected(self):
        with pytest.raises(ValueError, match="one channel"):
            encode_pgm(np.zeros((2, 4, 4)))


class TestRoundtrip:
    def test_rendered_image(self, tmp_path):
        pair = render_pair(sample_task(3, 1), 0)
        quantised = np.floor(pair.image.astype(np.float64) * 255 + 0.5) / 255
        write_pgm(quantised.astype(np.float32), tmp_path / "a.pgm")
        back = read_pgm(tmp_path / "a.pgm")
        np.testing.assert_array_equal(np.round(back * 255), np.round(quantised * 255))
        write_pgm(back, tmp_path / "b.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.just(1), st.integers(1, 9), st.integers(1, 9))))
    def test_eight_bit_identity(self, pixels):
        img = decode_pgm(encode_pgm(pixels.astype(np.float32) / 255))
        np.testing.assert_array_equal(np.round(img * 255).astype(np.uint8), pixels)
        assert encode_pgm(img) == encode_pgm(pixels.astype(np.float32) / 255)
