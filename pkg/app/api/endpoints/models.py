"""Model comparison endpoint: Bayes factor between two evidence estimates."""
from fastapi import APIRouter, HTTPException, status

from app.core.errors import EvidenceError
from app.schemas.phylo import BayesFactorReport, BayesFactorRequest
from app.services.compare import bayes_factor

router = APIRouter()


@router.post("/bayes-factor", response_model=BayesFactorReport)
async def compute_bayes_factor(payload: BayesFactorRequest) -> BayesFactorReport:
    replicates = None
    if payload.replicate_log_c0 is not None and payload.replicate_log_c1 is not None:
        replicates = (payload.replicate_log_c0, payload.replicate_log_c1)
    try:
        return bayes_factor(
            payload.m1,
            payload.m0,
            labels=(payload.labels[0], payload.labels[1]),
            fingerprints=(payload.fingerprint0, payload.fingerprint1),
            replicates=replicates,
        )
    except EvidenceError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))
