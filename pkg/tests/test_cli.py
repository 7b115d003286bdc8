import csv
import json
import logging
import math
from pathlib import Path

import pytest

from rmtenure.cli import main


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    d = tmp_path_factory.mktemp("case")
    assert main(["example", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def predicted(case):
    data, side = str(case / "case_study.csv"), str(case / "case_study.json")
    assert main(["fit", "--data", data, "--sidecar", side, "--out-dir", str(case / "fit")]) == 0
    assert main(["predict", "--data", data, "--sidecar", side, "--model",
                 str(case / "fit" / "model.json"), "--out-dir", str(case / "pred")]) == 0
    return case


def data_flags(case):
    return ["--data", str(case / "case_study.csv"), "--sidecar", str(case / "case_study.json")]


# ---------------------------------------------------------------- validate


def test_validate_bundled(case, capsys):
    assert main(["validate", *data_flags(case)]) == 0
    assert capsys.readouterr().out.strip() == "valid"


def test_bad_event_code_is_parse_error(case, tmp_path, capsys):
    lines = (case / "case_study.csv").read_text().splitlines()
    head, first = lines[0], lines[1].split(",")
    first[4] = "2"
    (tmp_path / "d.csv").write_text("\n".join([head, ",".join(first), *lines[2:]]) + "\n")
    code = main(["validate", "--data", str(tmp_path / "d.csv"),
                 "--sidecar", str(case / "case_study.json")])
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_protected_column(case, tmp_path, capsys):
    side = json.loads((case / "case_study.json").read_text())
    del side["protected_column"]
    (tmp_path / "s.json").write_text(json.dumps(side))
    code = main(["validate", "--data", str(case / "case_study.csv"), "--sidecar",
                 str(tmp_path / "s.json")])
    assert code == 2
    assert "protected_column" in capsys.readouterr().err


def test_validation_violations_reported(case, tmp_path, capsys):
    out = []
    for ln in (case / "case_study.csv").read_text().splitlines():
        f = ln.split(",")
        if f[0] == "L001" and f[1] == "P":
            f[3] = "1.0"  # exit before entry
        out.append(",".join(f))
    (tmp_path / "d.csv").write_text("\n".join(out) + "\n")
    code = main(["validate", "--data", str(tmp_path / "d.csv"),
                 "--sidecar", str(case / "case_study.json")])
    out = capsys.readouterr().out
    assert code == 1 and "L001" in out and out.strip().splitlines()[-1].startswith("invalid:")


def test_missing_file_exit_code(tmp_path, capsys):
    code = main(["validate", "--data", str(tmp_path / "no.csv"), "--sidecar", str(tmp_path / "no.json")])
    assert code == 2


# ---------------------------------------------------------------- fit / predict


def test_fit_outputs(predicted):
    model = json.loads((predicted / "fit" / "model.json").read_text())
    assert model["format"] == "rmtenure-model/1"
    coefs = rows(predicted / "fit" / "coefficients.csv")
    assert {r["process"] for r in coefs} == {"P", "R"}
    for r in coefs:
        assert float(r["hazard_ratio"]) == pytest.approx(math.exp(float(r["coef"])), rel=1e-12)
    manifest = json.loads((predicted / "fit" / "manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["input_digests"]["data"].startswith("sha256:")


def test_fit_null_covariate_has_nan_se(case, tmp_path):
    lines = (case / "case_study.csv").read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("detective")
    out = [lines[0]]
    for ln in lines[1:]:
        f = ln.split(",")
        if f[col]:
            f[col] = "0.0"
        out.append(",".join(f))
    (tmp_path / "d.csv").write_text("\n".join(out) + "\n")
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--sidecar", str(case / "case_study.json"),
                 "--out-dir", str(tmp_path / "fit")]) == 0
    det = [r for r in rows(tmp_path / "fit" / "coefficients.csv") if r["covariate"] == "detective"]
    assert len(det) == 2
    for r in det:
        assert float(r["coef"]) == 0.0 and r["se"] == "nan"


def test_saved_model_matches_refit(predicted, tmp_path):
    assert main(["predict", *data_flags(predicted), "--out-dir", str(tmp_path)]) == 0
    a, b = rows(predicted / "pred" / "means.csv"), rows(tmp_path / "means.csv")
    assert [r["subject_id"] for r in a] == [r["subject_id"] for r in b]
    for ra, rb in zip(a, b):
        for k in ra:
            if k != "subject_id":
                assert abs(float(ra[k]) - float(rb[k])) <= 1e-12 * max(1.0, abs(float(ra[k])))


def test_means_partition_window(predicted):
    side = json.loads((predicted / "case_study.json").read_text())
    from rmtenure.data import parse_time

    t0, t1 = (parse_time(x) for x in side["window"])
    entries = {}
    for r in rows(predicted / "case_study.csv"):
        if r["process"] == "P":
            entries[r["subject_id"]] = float(r["entry"])
    for r in rows(predicted / "pred" / "means.csv"):
        total = float(r["E_lt"]) + float(r["E_cap"]) + float(r["E_rt"])
        assert total == pytest.approx(t1 - max(t0, entries[r["subject_id"]]), abs=1e-10 * t1)


def test_curves_partition_and_shape(predicted):
    by_subject = {}
    for r in rows(predicted / "pred" / "curves.csv"):
        p = [float(r[k]) for k in ("p_lt", "p_cap", "p_rt")]
        assert abs(sum(p) - 1) <= 1e-10 and min(p) >= -1e-12
        by_subject.setdefault(r["subject_id"], []).append(p[1])
    # the higher-rank probability rises then falls for someone eligible to retire
    assert any(max(c) > c[0] + 0.05 and c[-1] < max(c) - 0.05 for c in by_subject.values())


def test_months_rescales(predicted, tmp_path):
    assert main(["predict", *data_flags(predicted), "--model", str(predicted / "fit" / "model.json"),
                 "--months", "--subjects", "L001,L002", "--out-dir", str(tmp_path)]) == 0
    days = {r["subject_id"]: r for r in rows(predicted / "pred" / "means.csv")}
    for r in rows(tmp_path / "means.csv"):
        assert float(r["E_cap"]) == pytest.approx(float(days[r["subject_id"]]["E_cap"]) / 30.4375,
                                                  rel=1e-14)


def test_subject_entering_after_window_skipped(case, tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="rmtenure"):
        assert main(["predict", *data_flags(case), "--window", "1996-11-18,1997-01-01",
                     "--out-dir", str(tmp_path)]) == 0
    ids = {r["subject_id"] for r in rows(tmp_path / "means.csv")}
    skipped = [m for m in caplog.messages if m.startswith("skipping")]
    assert skipped and len(ids) + len(skipped) == 146


def test_covariate_mismatch_rejected(predicted, tmp_path, capsys):
    side = json.loads((predicted / "case_study.json").read_text())
    side["promotion_covariates"] = side["promotion_covariates"][:-1]
    (tmp_path / "s.json").write_text(json.dumps(side))
    code = main(["predict", "--data", str(predicted / "case_study.csv"), "--sidecar",
                 str(tmp_path / "s.json"), "--model", str(predicted / "fit" / "model.json"),
                 "--out-dir", str(tmp_path)])
    assert code == 2 and "covariate" in capsys.readouterr().err


def test_threads_do_not_change_output(predicted, tmp_path):
    assert main(["predict", *data_flags(predicted), "--model", str(predicted / "fit" / "model.json"),
                 "--threads", "3", "--out-dir", str(tmp_path)]) == 0
    for name in ("means.csv", "curves.csv"):
        assert (tmp_path / name).read_bytes() == (predicted / "pred" / name).read_bytes()


# ---------------------------------------------------------------- compensate


def test_constant_and_piecewise_schedules_agree(predicted, tmp_path):
    rates = {"wage_lower": 5000.0, "wage_higher": 6200.0, "pension": 3100.0}
    (tmp_path / "c.json").write_text(json.dumps(rates))
    (tmp_path / "p.json").write_text(json.dumps({"segments": [dict(rates, start="1990-01-01")]}))
    assert main(["predict", *data_flags(predicted), "--model", str(predicted / "fit" / "model.json"),
                 "--months", "--out-dir", str(tmp_path / "m")]) == 0
    pred = tmp_path / "m"
    assert main(["compensate", "--predictions", str(pred / "means.csv"), "--schedule",
                 str(tmp_path / "c.json"), "--actual", "1000", "--out-dir", str(tmp_path / "c")]) == 0
    assert main(["compensate", "--predictions", str(pred / "means.csv"), "--curves",
                 str(pred / "curves.csv"), "--schedule", str(tmp_path / "p.json"), "--months",
                 "--actual", "1000", "--out-dir", str(tmp_path / "p")]) == 0
    c, p = rows(tmp_path / "c" / "damages.csv"), rows(tmp_path / "p" / "damages.csv")
    assert len(c) == len(p) == 146
    for a, b in zip(c, p):
        assert float(a["damages"]) == pytest.approx(float(b["damages"]), rel=1e-10)
        means = next(r for r in rows(pred / "means.csv") if r["subject_id"] == a["subject_id"])
        expect = math.fsum(float(means[k]) * v for k, v in
                           zip(("E_lt", "E_cap", "E_rt"), rates.values())) - 1000
        assert float(a["damages"]) == expect
        break


def test_actuals_from_csv(predicted, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"wage_lower": 1, "wage_higher": 1, "pension": 0}))
    ids = [r["subject_id"] for r in rows(predicted / "pred" / "means.csv")]
    (tmp_path / "a.csv").write_text("subject_id,actual\n" + "".join(f"{i},{n}\n" for n, i in enumerate(ids)))
    assert main(["compensate", "--predictions", str(predicted / "pred" / "means.csv"), "--schedule",
                 str(tmp_path / "s.json"), "--actual", str(tmp_path / "a.csv"),
                 "--out-dir", str(tmp_path)]) == 0
    assert [float(r["actual"]) for r in rows(tmp_path / "damages.csv")] == list(range(len(ids)))


def test_piecewise_needs_curves(predicted, tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"segments": [
        {"start": 0, "wage_lower": 1, "wage_higher": 2, "pension": 0}]}))
    code = main(["compensate", "--predictions", str(predicted / "pred" / "means.csv"),
                 "--schedule", str(tmp_path / "p.json"), "--out-dir", str(tmp_path)])
    assert code == 2 and "--curves" in capsys.readouterr().err


def test_schedule_starting_late_fails(predicted, tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps({"segments": [
        {"start": "2001-01-01", "wage_lower": 1, "wage_higher": 2, "pension": 0}]}))
    code = main(["compensate", "--predictions", str(predicted / "pred" / "means.csv"), "--curves",
                 str(predicted / "pred" / "curves.csv"), "--schedule", str(tmp_path / "p.json"),
                 "--out-dir", str(tmp_path)])
    assert code == 1 and "schedule starts" in capsys.readouterr().err


# ---------------------------------------------------------------- simulate


def test_simulate_smoke(tmp_path):
    cfg = {"n": 150, "replicates": 10, "seed": 3, "label": "smoke"}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(tmp_path / "cfg.json"), "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_used"] == 10 and len(report["replicates"]) == 10
    table = rows(tmp_path / "report.csv")
    assert [r["quantity"] for r in table] == ["cap", "lt", "rt", "beta1", "theta1",
                                              "censoring_P", "censoring_R"]
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 3


def test_simulate_unknown_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"n": 10, "sigma": 2}))
    assert main(["simulate", "--config", str(tmp_path / "cfg.json"), "--out-dir", str(tmp_path)]) == 2


def test_example_is_bundled_generator(case):
    from rmtenure.data import dumps_csv
    from rmtenure.simulation import generate_case_study

    assert (case / "case_study.csv").read_text() == dumps_csv(generate_case_study())


def _outputs(d: Path):
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                m = json.loads(data)
                m.pop("timestamp")
                data = json.dumps(m, sort_keys=True).encode()
            out[str(p.relative_to(d))] = data
    return out


def test_rerun_is_byte_identical(case, tmp_path):
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["fit", *data_flags(case), "--out-dir", str(out / "fit")]) == 0
        assert main(["predict", *data_flags(case), "--model", str(out / "fit" / "model.json"),
                     "--out-dir", str(out / "pred")]) == 0
    assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
