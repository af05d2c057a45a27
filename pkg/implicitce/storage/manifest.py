import hashlib
import json
import logging
import subprocess
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional

from implicitce import __version__
from implicitce.core.config import PROJECT_ROOT
from implicitce.models.reports import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@lru_cache
def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=PROJECT_ROOT,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = out.stdout.strip()
    return f"{__version__}+{described}" if out.returncode == 0 and described else __version__


def build_manifest(
    command: str,
    config: dict,
    *,
    inputs: Iterable[Path] = (),
    outputs: Iterable[Path] = (),
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
    wall_time_s: float = 0.0,
) -> RunManifest:
    digests = {str(p): file_digest(p) for p in inputs if Path(p).is_file()}
    return RunManifest(
        command=command,
        config=config,
        config_hash=config_hash,
        seed=seed,
        version=version_string(),
        inputs=digests,
        outputs=[str(p) for p in outputs],
        wall_time_s=wall_time_s,
    )


def write_manifest(directory: Path, manifest: RunManifest) -> Path:
    path = Path(directory) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("wrote %s", path)
    return path
