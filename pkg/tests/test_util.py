import pytest

import util


def test_parse_config_types_values():
    text = """
    # solver settings
    algorithm = dqam
    max-iters = 20
    theta=0.25
    stop = f_ratio:1e-4   # trailing comment
    workers =
    verbose = true
    """
    assert util.parse_config(text) == {
        "algorithm": "dqam",
        "max_iters": 20,
        "theta": 0.25,
        "stop": "f_ratio:1e-4",
        "workers": None,
        "verbose": True,
    }


def test_parse_config_keeps_file_order():
    assert list(util.parse_config("b=1\na=2\nc=3")) == ["b", "a", "c"]


def test_scientific_notation_is_a_float():
    assert util.parse_config("tol = 1e-4")["tol"] == pytest.approx(1e-4)


@pytest.mark.parametrize("text", ["just words", "= 3", "a = 1\n  =2"])
def test_parse_config_rejects_bad_lines(text):
    with pytest.raises(ValueError, match="expected key=value"):
        util.parse_config(text)


def test_read_config(tmp_path):
    path = tmp_path / "solver.cfg"
    path.write_text("seed = 4\n")
    assert util.read_config(path) == {"seed": 4}
