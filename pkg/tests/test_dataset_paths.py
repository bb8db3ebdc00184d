import sys
from pathlib import Path

# Make src importable
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.append(str(SRC))

from mate.dataset_paths import DatasetPaths, plan_sweep  # noqa: E402


def test_scene_plan_layout(tmp_path):
    plan = DatasetPaths(tmp_path).plan_scene(7)
    assert plan.scene_dir == tmp_path / "scene_00007"
    assert [p.name for p in plan.files()] == [
        "illum.ppm",
        "material.ppm",
        "depth.pgm",
        "mask.pgm",
        "target.ppm",
        "spec.txt",
    ]
    assert plan.missing() == plan.files()
    plan.ensure_dirs()
    plan.spec_path.write_text("", encoding="utf-8")
    assert plan.spec_path not in plan.missing()


def test_scene_indices_ignore_other_entries(tmp_path):
    for name in ("scene_00002", "scene_00000", "scene_12", "notes"):
        (tmp_path / name).mkdir()
    (tmp_path / "scene_00001").write_text("not a folder", encoding="utf-8")
    paths = DatasetPaths(tmp_path)
    assert paths.scene_indices() == [0, 2]
    assert [p.scene_dir.name for p in paths.plans()] == ["scene_00000", "scene_00002"]
    assert DatasetPaths(tmp_path / "absent").scene_indices() == []


def test_sweep_plan_names(tmp_path):
    plan = plan_sweep(tmp_path / "out", "gamma")
    assert plan.sheet_path.name == "gamma_sheet.ppm"
    assert plan.csv_path.name == "gamma.csv"
    assert plan.image_path("1.8").name == "gamma_1.8.ppm"
    assert plan.image_path("illumination").name == "gamma_illumination.ppm"
    assert plan.image_path("a b/c").name == "gamma_a_b_c.ppm"
    plan.ensure_dirs()
    assert (tmp_path / "out").is_dir()
