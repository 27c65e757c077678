from pathlib import Path

from fastapi import APIRouter, Depends, Form, HTTPException, UploadFile

from app.api.deps import get_store
from app.core.config import settings
from app.core.errors import FormantDiffError
from app.models.schemas import Solver, SynthesisResponse
from app.services.synthesis import synthesize_to_files
from app.utils.audio_io import read_wav_bytes

router = APIRouter()


def resolve_output_path(out: str) -> Path:
    # outputs stay under data_root
    root = Path(settings.data_root).resolve()
    target = (root / out).resolve()
    if not target.is_relative_to(root):
        raise HTTPException(status_code=400, detail=f"Output path must stay under {root}.")
    return target


@router.post(
    "",
    response_model=SynthesisResponse,
    summary="Synthesize a mel-spectrogram from phoneme text and a reference recording.",
)
async def synth(
    reference: UploadFile,
    text: str = Form(...),
    ckpt: str = Form(...),
    out: str = Form(...),
    solver: Solver = Form(Solver.PF),
    steps: int = Form(10, ge=0),
    tau: float = Form(1.5, gt=0),
    seed: int = Form(0),
    store=Depends(get_store),
):
    target = resolve_output_path(out)

    # read the reference upload first
    try:
        contents = reference.file.read()
    finally:
        reference.file.close()

    try:
        model, alphabet = store.get_model(ckpt)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except FormantDiffError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc

    try:
        wave = read_wav_bytes(contents, reference.filename or "reference")
        result, _ = synthesize_to_files(model, alphabet, text, wave, target, solver, steps, tau, seed)
    except FormantDiffError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc

    return SynthesisResponse(
        success=True,
        message="Synthesis finished.",
        mel_path=str(target),
        n_mels=int(result.mel.shape[0]),
        n_frames=int(result.mel.shape[1]),
        durations=[int(d) for d in result.durations],
    )
