# cli/manifest.py - Per-run manifest written next to the outputs
import logging
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime
from importlib import metadata
from typing import Any, Dict, List, Optional

from cli.output import write_json
from mbot_core import __version__

logger = logging.getLogger(__name__)

TRACKED_DISTRIBUTIONS = ("numpy", "scipy", "pandas", "SQLAlchemy", "opencv-python-headless", "colorama")
MANIFEST_NAME = "manifest.json"


def collect_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "minibatch-ot": __version__}
    for name in TRACKED_DISTRIBUTIONS:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


@dataclass
class RunManifest:
    subcommand: str
    argv: List[str]
    seed: Optional[int]
    versions: Dict[str, str] = field(default_factory=collect_versions)
    started_at: datetime = field(default_factory=datetime.utcnow)
    wall_clock_seconds: float = 0.0
    outputs: List[str] = field(default_factory=list)
    exit_status: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "argv": list(self.argv),
            "seed": self.seed,
            "versions": self.versions,
            "started_at": self.started_at.isoformat(),
            "wall_clock_seconds": self.wall_clock_seconds,
            "outputs": list(self.outputs),
            "exit_status": self.exit_status,
            "extra": self.extra,
        }

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        write_json(self.to_dict(), path)
        logger.info(f"Wrote run manifest to {path}")
        return path
