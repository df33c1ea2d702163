import hashlib

import numpy as np
import pytest

from dsa.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from dsa.field import read_field, series_field, write_field


def _run(tmp_path, command, text, out="out", extra=()):
    cfg = tmp_path / f"{command}.ini"
    cfg.write_text(text)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def linear(tmp_path_factory):
    d = tmp_path_factory.mktemp("lin")
    assert _run(d, "synth", "[synth]\nkind = linear-mixture\nn = 2000\n", "syn") == EXIT_OK
    return d


def test_synth_outputs(linear):
    syn = linear / "syn"
    assert {"observed.txt", "truth.txt", "metadata.txt", "report.txt", "manifest.ini"} <= set(_tree(syn))
    assert read_field(syn / "observed.txt").n_components == 3


def test_extract_retains_two_and_reruns_identically(linear):
    text = "[extract]\ninput = syn/observed.txt\ntruth = syn/truth.txt\nrestarts = 4\nshuffles = 50\nnegentropy_shuffles = 50\n"
    assert _run(linear, "extract", text, "ext") == EXIT_OK
    ext = linear / "ext"
    report = (ext / "report.txt").read_text()
    assert "retained" in report
    assert read_field(ext / "retained_sources.txt").n_components == 2
    rerun = main(["extract", "--config", str(ext / "manifest.ini"), "--out", str(linear / "ext2")])
    assert rerun == EXIT_OK
    assert _tree(ext) == _tree(linear / "ext2")


def test_predict_and_simulate(tmp_path):
    assert _run(tmp_path, "synth", "[run]\nseed = 3\n[synth]\nkind = polynomial-link\nn = 3000\n", "pl") == EXIT_OK
    text = "[predict]\nsources = pl/truth.txt\npredictand = pl/observed.txt\nshuffles = 100\n"
    assert _run(tmp_path, "predict", text, "pr") == EXIT_OK
    assert "order 2 effective map exceeds the null" in (tmp_path / "pr" / "report.txt").read_text()
    write_field(series_field(np.zeros((11, 1))), tmp_path / "obs.txt")
    text = (
        "[simulate]\nsources = pl/truth.txt\npredictand = pl/observed.txt\nobs = obs.txt\n"
        "q = 3\nensemble = 100\nhorizon = 10\nshuffles = 20\n"
    )
    assert _run(tmp_path, "simulate", text, "sim") == EXIT_OK
    lines = (tmp_path / "sim" / "ensemble.csv").read_text().splitlines()
    assert len(lines) == 12 and lines[1].split(",")[7] != ""
    rerun = main(["simulate", "--config", str(tmp_path / "sim" / "manifest.ini"), "--out", str(tmp_path / "sim2")])
    assert rerun == EXIT_OK
    assert _tree(tmp_path / "sim") == _tree(tmp_path / "sim2")


def test_decompose_and_report(tmp_path):
    assert _run(tmp_path, "synth", "[synth]\nkind = traveling-wave\n", "tw") == EXIT_OK
    assert _run(tmp_path, "decompose", "[decompose]\ninput = tw/observed.txt\n", "dec") == EXIT_OK
    assert "rank 1" in (tmp_path / "dec" / "report.txt").read_text()
    assert _run(tmp_path, "report", "[report]\ninput = dec\n", "rep") == EXIT_OK
    digest = hashlib.sha256((tmp_path / "dec" / "manifold.txt").read_bytes()).hexdigest()
    assert digest in (tmp_path / "rep" / "report.txt").read_text()


def test_usage_errors(tmp_path, capsys):
    assert main(["bogus"]) == EXIT_USAGE
    assert _run(tmp_path, "synth", "[synth]\nkind = linear-mixture\nphi9 = 3\n") == EXIT_USAGE
    assert "phi9" in capsys.readouterr().err
    assert _run(tmp_path, "synth", "[synth]\nkind = linear-mixture\nn = 10\n") == EXIT_USAGE
    assert "n" in capsys.readouterr().err
    text = "[simulate]\nsources = a\npredictand = b\nq = 6\nbeta = 5\n"
    assert _run(tmp_path, "simulate", text) == EXIT_USAGE
    assert "exceeds beta" in capsys.readouterr().err
    assert _run(tmp_path, "extract", "[extract]\ninput = nope.txt\n") == EXIT_USAGE
    assert "missing input" in capsys.readouterr().err


def test_unreadable_input_is_io_error(tmp_path):
    (tmp_path / "junk.txt").write_text("not a field\n")
    assert _run(tmp_path, "extract", "[extract]\ninput = junk.txt\n") == EXIT_IO


def test_noise_only_extract_warns(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_field(series_field(rng.normal(size=(1500, 3))), tmp_path / "noise.txt")
    text = "[extract]\ninput = noise.txt\nrestarts = 2\nshuffles = 50\nnegentropy_shuffles = 20\n"
    assert _run(tmp_path, "extract", text) == EXIT_OK
    assert "warning" in capsys.readouterr().err
    assert not (tmp_path / "out" / "retained_sources.txt").exists()
