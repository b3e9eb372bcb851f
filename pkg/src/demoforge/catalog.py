"""Registry of robot models and scenes: the bundled resources plus any
user-defined files under <data_dir>/robots and <data_dir>/scenes.

User files override bundled entries of the same name, which is how operators
customize tasks without touching the package.
"""

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .configtext import ConfigError, parse
from .kinematics import RobotModel, load_robot_model
from .store import robot_digest_of_text
from .world import SceneSpec, parse_scene


@dataclass(frozen=True)
class RobotEntry:
    name: str
    text: str
    model: RobotModel
    digest: str


@dataclass(frozen=True)
class SceneEntry:
    name: str
    text: str
    spec: SceneSpec
    digest: str


class Catalog:
    def __init__(self):
        self.robots = {}
        self.scenes = {}

    def add_robot_text(self, text: str, path: str = "<robot>") -> RobotEntry:
        model = load_robot_model(parse(text, path=path))
        entry = RobotEntry(name=model.name, text=text, model=model,
                           digest=robot_digest_of_text(text))
        self.robots[entry.name] = entry
        return entry

    def add_scene_text(self, text: str, path: str = "<scene>") -> SceneEntry:
        spec = parse_scene(parse(text, path=path))
        entry = SceneEntry(name=spec.name, text=text, spec=spec, digest=spec.digest())
        self.scenes[entry.name] = entry
        return entry

    def models(self) -> dict:
        return {name: entry.model for name, entry in self.robots.items()}

    def scene_by_digest(self, digest: str):
        for entry in self.scenes.values():
            if entry.digest == digest:
                return entry
        return None


def load_catalog(data_dir=None) -> Catalog:
    """Bundled resources first, then user files from the data dir."""
    catalog = Catalog()
    pkg = resources.files("demoforge") / "resources"
    for item in sorted((pkg / "robots").iterdir(), key=lambda p: p.name):
        if item.name.endswith(".robot"):
            catalog.add_robot_text(item.read_text(encoding="utf-8"), path=item.name)
    for item in sorted((pkg / "scenes").iterdir(), key=lambda p: p.name):
        if item.name.endswith(".scene"):
            catalog.add_scene_text(item.read_text(encoding="utf-8"), path=item.name)
    if data_dir is not None:
        root = Path(data_dir)
        for path in sorted((root / "robots").glob("*.robot")):
            catalog.add_robot_text(path.read_text(encoding="utf-8"), path=str(path))
        for path in sorted((root / "scenes").glob("*.scene")):
            catalog.add_scene_text(path.read_text(encoding="utf-8"), path=str(path))
    return catalog


def bundled_script_path(name: str) -> Path:
    """Path of a bundled teleop script (test fixtures and demos)."""
    path = resources.files("demoforge") / "resources" / "scripts" / f"{name}.script"
    return Path(str(path))
