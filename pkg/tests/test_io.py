import json
import math

import numpy as np
import pytest

from sepfx.errors import ConfigError, DataError
from sepfx.identification import gformula_exact
from sepfx.io import (discrete_law_from_dict, discrete_law_to_dict, dump_toml, grid_from_config,
                      key_line, law_from_config, law_to_config, parse_toml, preset_text,
                      read_csv, to_json, write_csv)
from sepfx.sim import simulate

from conftest import censored_k1_law, random_discrete_law, two_cov_law


@pytest.mark.parametrize("design", ["TwoArm", "FourArm", "SixArm"])
def test_csv_round_trip(tmp_path, design):
    ds = simulate(two_cov_law(2, "TerminalDBeforeC"), 300, 1, design)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = read_csv(path, "TerminalDBeforeC", ds.partition)
    assert back.design == design and back.equals(ds)
    assert back.covariate_names == ds.covariate_names
    # missing cells are written empty
    assert ",," in path.read_text()


def test_csv_header_layout(tmp_path):
    ds = simulate(censored_k1_law(), 5, 0)
    write_csv(ds, tmp_path / "d.csv")
    head = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert head == "id,L0_x,A,C_1,C_2,D_1,D_2,L1_l,Y"


def test_bad_cell_names_the_line(tmp_path):
    ds = simulate(censored_k1_law(), 5, 0)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[2] = "7"
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 4, column A"):
        read_csv(path)


@pytest.mark.parametrize("text, message", [
    ("", "empty file"),
    ("x,Y\n", "first column"),
    ("id,A,D_1,Y\n", "C_1"),
    ("id,A,C_1,D_1,D_3,Y\n", "D columns"),
    ("id,C_1,D_1,Y\n", "treatment"),
    ("id,A,C_1,D_1,Y\n1,0,0\n", "expected 5 fields"),
    ("id,A,C_1,D_1,Y\n1,0,0,0,abc\n", "cannot parse"),
])
def test_malformed_files(tmp_path, text, message):
    path = tmp_path / "d.csv"
    path.write_text(text)
    with pytest.raises(DataError, match=message):
        read_csv(path)


def test_record_violations_are_reported(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,A,C_1,D_1,Y\n1,0,0,1,2.5\n")
    with pytest.raises(DataError, match="Y must be missing"):
        read_csv(path)
    assert read_csv(path, validate=False).n == 1


def test_missing_file():
    with pytest.raises(DataError, match="cannot read"):
        read_csv("/nonexistent/d.csv")


@pytest.mark.parametrize("make", [censored_k1_law, lambda: two_cov_law(2)])
def test_law_toml_round_trip(make):
    law = make()
    cfg = parse_toml(dump_toml(law_to_config(law)))
    back = law_from_config(grid_from_config(cfg["grid"]), cfg["law"])
    assert law_to_config(back) == law_to_config(law)
    a, b = simulate(law, 200, 3), simulate(back, 200, 3)
    assert a.equals(b)


def test_preset_parses():
    cfg = parse_toml(preset_text("swog"))
    assert cfg["grid"]["K"] == 11 and cfg["simulate"]["n"] == 487


def test_toml_syntax_error_has_line():
    with pytest.raises(ConfigError) as err:
        parse_toml("a = 1\nb = = 2\n")
    assert err.value.line == 2


def test_key_line_finds_tables_and_keys():
    text = "seed = 1\n[bootstrap]\nweigths = 3\n[[law.baseline]]\nname = 'x'\n"
    assert key_line(text, ["bootstrap", "weigths"]) == 3
    assert key_line(text, ["bootstrap"]) == 2
    assert key_line(text, ["law", "baseline"]) == 4
    assert key_line(text, ["nope"]) is None


def test_discrete_law_dict_round_trip():
    law = random_discrete_law(np.random.default_rng(4), K=2, q=2, censoring=True)
    blob = json.loads(json.dumps(discrete_law_to_dict(law)))
    back = discrete_law_from_dict(blob)
    for t in ((0, 0), (0, 1), (1, 0), (1, 1)):
        assert gformula_exact(back, *t) == gformula_exact(law, *t)


def test_json_output_is_sorted_and_nan_free():
    text = to_json({"b": float("nan"), "a": np.float64(1.5), "c": np.arange(2),
                    "d": (np.bool_(True), np.int64(3))})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    blob = json.loads(text)
    assert blob == {"a": 1.5, "b": None, "c": [0, 1], "d": [True, 3]}
    with pytest.raises(ValueError):
        to_json({"x": math.inf})
