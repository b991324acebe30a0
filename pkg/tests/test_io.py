import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsparse import io
from stsparse.model import Hyperparams

MODEL_LINES = """sigma_x2 = 1e4
sigma2 = 1e-4
eta = 0.999
xi = 0.9999
ell_w = 15
ell_sigma = 10
alpha_w = 10
alpha_sigma = 10
"""


class TestMatrix:
    def test_round_trip_is_exact(self, tmp_path):
        m = np.random.default_rng(0).standard_normal((5, 7)) * 10.0 ** np.arange(-3, 4)
        io.save_matrix(m, tmp_path / "m.txt")
        assert np.array_equal(io.load_matrix(tmp_path / "m.txt"), m)

    @given(arrays(float, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
    @settings(max_examples=50)
    def test_round_trip_property(self, m):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as d:
            io.save_matrix(m, Path(d) / "m.txt")
            assert np.array_equal(io.load_matrix(Path(d) / "m.txt"), m)

    def test_format(self, tmp_path):
        io.save_matrix(np.array([[1.0, 2.5e-7]]), tmp_path / "m.txt")
        assert (tmp_path / "m.txt").read_bytes() == b"1 2\n1.0 2.5e-07\n"

    def test_extra_row_names_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("2 2\n1 2\n3 4\n5 6\n")
        with pytest.raises(io.FormatError, match=":4:"):
            io.load_matrix(tmp_path / "m.txt")

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.txt").write_text("")
        with pytest.raises(io.FormatError, match="missing header"):
            io.load_matrix(tmp_path / "m.txt")

    @pytest.mark.parametrize("text,line", [("2 2\n1 2\n", ":3:"), ("1 2\n1\n", ":2:"),
                                           ("1 1\nabc\n", ":2:"), ("x y\n", ":1:")])
    def test_malformed(self, tmp_path, text, line):
        (tmp_path / "m.txt").write_text(text)
        with pytest.raises(io.FormatError, match=line):
            io.load_matrix(tmp_path / "m.txt")


class TestConfig:
    def test_default_profile_is_table_values(self):
        cfg = io.load_profile()
        assert cfg.hyper == Hyperparams(max_iter=200)
        h = cfg.hyper
        assert (h.sigma_x2, h.sigma2, h.eta, h.xi, h.ell_w, h.ell_sigma, h.alpha_w, h.alpha_sigma) == \
            (1e4, 1e-4, 0.999, 0.9999, 15, 10, 10, 10)
        assert cfg.ratios == [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55]
        assert cfg.seeds == list(range(10))

    @pytest.mark.parametrize("name", io.PROFILES)
    def test_all_profiles_parse(self, name):
        assert io.load_profile(name).hyper.sigma2 > 0

    def test_range_error(self):
        with pytest.raises(io.FormatError, match="eta"):
            io.parse_config_text(MODEL_LINES.replace("eta = 0.999", "eta = 1.5"))

    def test_unknown_key_named(self):
        with pytest.raises(io.FormatError, match="'foo'"):
            io.parse_config_text(MODEL_LINES + "foo = 1\n")

    def test_missing_mandatory(self):
        with pytest.raises(io.FormatError, match="ell_w"):
            io.parse_config_text(MODEL_LINES.replace("ell_w = 15\n", ""))

    def test_type_error(self):
        with pytest.raises(io.FormatError, match=":9:"):
            io.parse_config_text(MODEL_LINES + "n = many\n")

    def test_duplicate(self):
        with pytest.raises(io.FormatError, match="duplicate"):
            io.parse_config_text(MODEL_LINES + "sigma2 = 1\n")

    def test_bad_ratio(self):
        with pytest.raises(io.FormatError, match="ratios"):
            io.parse_config_text(MODEL_LINES + "ratios = 0.2 1.5\n")

    def test_comments_and_plumbing(self):
        cfg = io.parse_config_text("# header\n" + MODEL_LINES + "tol = 1e-4  # tighter\nseeds = 3, 4\n")
        assert cfg.hyper.tol == 1e-4 and cfg.seeds == [3, 4]

    def test_locations_relative_to_file(self, tmp_path):
        (tmp_path / "vox.txt").write_text("0 0 0\n1 0 0\n")
        (tmp_path / "run.cfg").write_text(MODEL_LINES + "kernel = dipole\nlocations = vox.txt\n")
        cfg = io.parse_config(tmp_path / "run.cfg")
        assert cfg.hyper.locations.shape == (2, 3)

    def test_text_round_trip(self):
        cfg = io.load_profile()
        back = io.parse_config_text(io.config_to_text(cfg))
        assert back.to_dict() == cfg.to_dict()


class TestRecords:
    def _rec(self, seed):
        return io.ResultRecord("twolevel", 0.3, seed, 1e-4, 0.99, 1.0, 0.98, 50, 49, 49, 12, True, 1.5)

    def test_append_only_and_concatenable(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        io.append_records(a, [self._rec(0)])
        io.append_records(a, [self._rec(1)])
        io.append_records(b, [self._rec(2)])
        (tmp_path / "c.jsonl").write_text(a.read_text() + b.read_text())
        assert [r.seed for r in io.read_records(tmp_path / "c.jsonl")] == [0, 1, 2]

    def test_malformed_record(self, tmp_path):
        (tmp_path / "r.jsonl").write_text('{"method": "x"}\n')
        with pytest.raises(io.FormatError, match=":1:"):
            io.read_records(tmp_path / "r.jsonl")

    def test_manifest_round_trip(self, tmp_path):
        cfg = io.load_profile()
        path = io.write_manifest(tmp_path, "recover", cfg, {"data": "d"}, ["X_hat.txt"])
        m = io.read_manifest(path)
        assert m["version"] == io.VERSION and m["seed"] == cfg.seed
        assert io.config_from_manifest(m).to_dict() == cfg.to_dict()
        json.loads(path.read_text())
