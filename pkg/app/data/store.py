import logging
from pathlib import Path
from threading import Lock
from typing import Dict, List, Tuple

from app.models.schemas import PhonemeSpec
from app.services.acoustic_model import FormantDiffModel
from app.services.training import checkpoint_alphabet, load_checkpoint, model_from_checkpoint

logger = logging.getLogger(__name__)


class ModelStore:
    # very simple in-memory cache of loaded checkpoints
    def __init__(self):
        self.models: Dict[str, Tuple[FormantDiffModel, List[PhonemeSpec]]] = {}
        self._lock = Lock()

    def get_model(self, ckpt: Path) -> Tuple[FormantDiffModel, List[PhonemeSpec]]:
        key = str(Path(ckpt).resolve())
        with self._lock:
            if key not in self.models:
                payload = load_checkpoint(Path(ckpt))
                self.models[key] = (model_from_checkpoint(payload), checkpoint_alphabet(payload))
                logger.info("Loaded checkpoint %s", key)
            return self.models[key]

    def clear(self):
        with self._lock:
            self.models.clear()


_store = None


def get_model_store():
    # return one shared instance of ModelStore
    global _store
    if _store is None:
        _store = ModelStore()
    return _store
