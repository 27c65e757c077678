import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from app.core.config import Settings
from app.models.schemas import RunManifest

logger = logging.getLogger(__name__)

RUN_MANIFEST_FILE = "run_manifest.json"


def config_hash(cfg: Settings) -> str:
    # hash of the settings as they were resolved for this run
    dumped = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(dumped.encode("utf-8")).hexdigest()


def checkpoint_id(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def write_run_manifest(out_dir: Path, command: str, cfg: Settings, seed: Optional[int] = None,
                       ckpt: Optional[Path] = None, arguments: Optional[Dict[str, object]] = None,
                       outputs: Optional[List[Path]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        config_hash=config_hash(cfg),
        seed=seed,
        checkpoint_id=checkpoint_id(ckpt) if ckpt is not None and Path(ckpt).is_file() else None,
        arguments={k: str(v) if isinstance(v, Path) else v for k, v in (arguments or {}).items()},
        outputs=[str(p) for p in outputs or []],
    )
    path = out_dir / RUN_MANIFEST_FILE
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote run manifest %s", path)
    return path
