from pathlib import Path

from fastapi import APIRouter, HTTPException

from app.core.errors import FormantDiffError
from app.models.schemas import CorpusRequest, CorpusSummary
from app.services.toy_corpus import MANIFEST_FILE, generate_corpus

router = APIRouter()


@router.post(
    "/generate",
    response_model=CorpusSummary,
    summary="Synthesize a toy source-filter corpus.",
)
async def generate(request: CorpusRequest):
    out_dir = Path(request.out_dir)
    try:
        manifest = generate_corpus(
            request.alphabet_size,
            request.n_utterances,
            request.n_speakers,
            request.seed,
            out_dir,
            n_heldout_speakers=request.n_heldout_speakers,
        )
    except FormantDiffError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except OSError as exc:
        raise HTTPException(status_code=400, detail=f"Could not write corpus to '{out_dir}': {exc}") from exc

    wave_files = sum(1 for e in manifest.entries if manifest.audio_file(e).is_file())
    return CorpusSummary(
        success=True,
        message="Corpus generated successfully.",
        manifest_path=str(out_dir / MANIFEST_FILE),
        n_utterances=len(manifest.entries),
        n_speakers=len(manifest.speakers),
        wave_files=wave_files,
    )
