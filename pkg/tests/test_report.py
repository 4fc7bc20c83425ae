import csv
import json

from lad.report import append_block, format_table, plot_curves, plot_sweep, sweep_rows, write_table


def test_table_alignment():
    text = format_table(["arm", "miou"], [["teacher", 0.912345], ["b", None]])
    lines = text.splitlines()
    assert len({len(line) for line in lines}) == 1
    assert "0.9123" in text and "-" in lines[-1]


def test_table_twins_hold_exact_values(tmp_path):
    value = 0.1 + 0.2
    write_table(tmp_path / "t", "title", ["arm", "miou"], [["x", value]], {"seed": 0})
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["rows"][0]["miou"] == value
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert float(rows[1][1]) == value
    assert "# seed: 0" in (tmp_path / "t.txt").read_text()


def test_blocks_append(tmp_path):
    append_block(tmp_path, "eval", {"val_miou": 0.5, "per_image": [0.1, 0.2]})
    append_block(tmp_path, "stability", {"kl_mean": 0.0})
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert [json.loads(x)["command"] for x in lines] == ["eval", "stability"]
    assert (tmp_path / "report.txt").read_text().count("== ") == 2


def test_sweep_shape_and_plots(tmp_path):
    alphas = (0.0, 0.01, 1.0)
    cells = [{"alpha": a, "class_wise": cw, "teacher_miou": 0.9, "student_miou": 0.8}
             for a in alphas for cw in (True, False)]
    columns, rows = sweep_rows(cells, alphas)
    assert len(columns) == 1 + 2 * len(alphas) and len(rows) == 2
    assert rows[0][0] == "class-wise" and rows[1][1:] == [0.9, 0.8] * 3
    assert plot_sweep(cells, alphas, tmp_path / "s.png", baseline=0.7).stat().st_size > 0
    hist = {"a": [{"iter": 1, "val_miou": 0.1}, {"iter": 2, "loss_total": 1.0}]}
    assert plot_curves(hist, tmp_path / "c.png").stat().st_size > 0
