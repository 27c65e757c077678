from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException

from app.api.deps import get_store
from app.core.config import SweepSpec
from app.core.errors import FormantDiffError
from app.models.schemas import EvaluateRequest, EvalSummary
from app.services.evaluation import evaluate_model
from app.services.toy_corpus import read_manifest

router = APIRouter()


@router.post(
    "",
    response_model=EvalSummary,
    summary="Run the proxy-CER evaluation of a checkpoint on a corpus split.",
)
async def evaluate(
    request: EvaluateRequest,
    store=Depends(get_store),
):
    try:
        model, alphabet = store.get_model(request.ckpt)
        manifest = read_manifest(Path(request.corpus_dir))
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except FormantDiffError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc

    if [s.symbol for s in alphabet] != [s.symbol for s in manifest.alphabet]:
        raise HTTPException(
            status_code=400,
            detail="Checkpoint and corpus use different phoneme alphabets.",
        )

    spec = SweepSpec(
        solvers=[s.value for s in request.solvers],
        step_counts=request.step_counts,
        tau=request.tau,
        seeds=request.seeds,
    )
    try:
        report = evaluate_model(model, manifest, request.split, spec, request.max_utterances)
    except FormantDiffError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc

    return EvalSummary(aggregates=report.aggregates, n_records=len(report.records))
