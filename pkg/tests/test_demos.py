import runpy
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parent.parent / "demos"


@pytest.mark.parametrize("name", ["c2_masks.py", "preprocessing.py"])
def test_demo_runs(name, capsys):
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    assert capsys.readouterr().out


def test_pipeline_demo_runs(capsys, monkeypatch):
    monkeypatch.setattr("sys.argv", ["pipeline.py", "2"])
    runpy.run_path(str(DEMOS / "pipeline.py"), run_name="__main__")
    assert "overall" in capsys.readouterr().out
