"""Helpers for planning on-disk locations of scenes and sweep artifacts."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

SCENE_PREFIX = "scene_"
_SCENE_RE = re.compile(r"^scene_(\d{5,})$")


@dataclass
class ScenePlan:
    scene_dir: Path
    illum_path: Path
    material_path: Path
    depth_path: Path
    mask_path: Path
    target_path: Path
    spec_path: Path

    def ensure_dirs(self) -> None:
        self.scene_dir.mkdir(parents=True, exist_ok=True)

    def files(self) -> list[Path]:
        return [
            self.illum_path,
            self.material_path,
            self.depth_path,
            self.mask_path,
            self.target_path,
            self.spec_path,
        ]

    def missing(self) -> list[Path]:
        return [p for p in self.files() if not p.is_file()]


class DatasetPaths:
    def __init__(self, root: Path):
        self.root = Path(root)

    def plan_scene(self, index: int) -> ScenePlan:
        scene_dir = self.root / self.scene_name(index)
        return ScenePlan(
            scene_dir=scene_dir,
            illum_path=scene_dir / "illum.ppm",
            material_path=scene_dir / "material.ppm",
            depth_path=scene_dir / "depth.pgm",
            mask_path=scene_dir / "mask.pgm",
            target_path=scene_dir / "target.ppm",
            spec_path=scene_dir / "spec.txt",
        )

    def scene_indices(self) -> list[int]:
        if not self.root.is_dir():
            return []
        found = []
        for child in self.root.iterdir():
            match = _SCENE_RE.match(child.name)
            if match and child.is_dir():
                found.append(int(match.group(1)))
        return sorted(found)

    def plans(self) -> list[ScenePlan]:
        return [self.plan_scene(i) for i in self.scene_indices()]

    @staticmethod
    def scene_name(index: int) -> str:
        return f"{SCENE_PREFIX}{index:05d}"


@dataclass
class SweepPlan:
    out_dir: Path
    sweep: str
    sheet_path: Path
    csv_path: Path

    def ensure_dirs(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def image_path(self, label: str) -> Path:
        return self.out_dir / f"{self.sweep}_{self._slug(label)}.ppm"

    @staticmethod
    def _slug(label: str) -> str:
        return re.sub(r"[^A-Za-z0-9.+-]+", "_", label).strip("_") or "run"


def plan_sweep(out_dir: Path, sweep: str) -> SweepPlan:
    out_dir = Path(out_dir)
    return SweepPlan(
        out_dir=out_dir,
        sweep=sweep,
        sheet_path=out_dir / f"{sweep}_sheet.ppm",
        csv_path=out_dir / f"{sweep}.csv",
    )


__all__ = ["DatasetPaths", "ScenePlan", "SweepPlan", "plan_sweep"]
