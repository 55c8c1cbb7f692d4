"""Evidence endpoint: estimate log c from an uploaded chain, as JSON or streamed via SSE."""
import asyncio
import io
import logging
from dataclasses import dataclass

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile, status
from fastapi.responses import StreamingResponse
from pydantic import ValidationError

from app.api.streaming import event_stream, sse
from app.core.config import settings
from app.core.errors import EvidenceError
from app.schemas.evidence import EvidenceReport
from app.schemas.phylo import ChainMetadata
from app.services import chain_io
from app.services.evidence import (
    EstimatorConfig,
    IdrContext,
    estimator_summary,
    parse_k_grid,
    suggest_k_grid,
)
from app.services.inflation import LogDensity
from app.services.seqio import alignment_from_text

logger = logging.getLogger(__name__)

router = APIRouter()


@dataclass(frozen=True)
class ChainRequest:
    table: chain_io.ChainTable
    log_g: LogDensity | None
    fingerprint: str | None
    config: EstimatorConfig


async def _read_upload(upload: UploadFile) -> bytes:
    data = await upload.read()
    if len(data) > settings.MAX_UPLOAD_BYTES:
        raise HTTPException(
            status_code=status.HTTP_413_REQUEST_ENTITY_TOO_LARGE,
            detail=f"{upload.filename} exceeds {settings.MAX_UPLOAD_BYTES} bytes",
        )
    return data


async def chain_request(
    chain: UploadFile = File(..., description="Chain CSV with parameter columns and log_post"),
    sidecar: UploadFile | None = File(None, description="JSON sidecar written next to the chain"),
    alignment: UploadFile | None = File(None, description="FASTA or PHYLIP alignment the chain was sampled on"),
    estimators: str = Form("idr,hm,am"),
    k_grid: str = Form("auto"),
    bootstrap: int = Form(0, ge=0),
    seed: int = Form(0, ge=0),
    target: str | None = Form(None, description="Analytic target for chains without a sidecar"),
    literal_hm: bool = Form(False),
    absolute_k: bool = Form(False),
) -> ChainRequest:
    try:
        meta = None
        if sidecar is not None:
            meta = ChainMetadata.model_validate_json(await _read_upload(sidecar))
        table = chain_io.chain_from_csv(io.BytesIO(await _read_upload(chain)), meta, label=chain.filename or "chain")
        aligned = None
        if alignment is not None:
            text = (await _read_upload(alignment)).decode("utf-8")
            aligned = alignment_from_text(text, source=alignment.filename or "alignment")
        log_g, fingerprint = chain_io.resolve_target(table, aligned, target)
        config = EstimatorConfig(
            methods=tuple(v.strip().lower() for v in estimators.split(",") if v.strip()),
            k_grid=tuple(parse_k_grid(k_grid)) or None,
            bootstrap=bootstrap,
            seed=seed,
            relative_k=not absolute_k,
            literal_hm=literal_hm,
        )
    except (EvidenceError, ValidationError, UnicodeDecodeError) as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))
    return ChainRequest(table, log_g, fingerprint, config)


def _summarize(request: ChainRequest) -> EvidenceReport:
    table = request.table
    return estimator_summary(
        chain_io.table_sample(table),
        log_g=request.log_g,
        log_lik=table.log_lik,
        config=request.config,
        columns=table.columns,
        data_fingerprint=request.fingerprint,
    )


@router.post("/", response_model=EvidenceReport)
async def estimate_evidence(request: ChainRequest = Depends(chain_request)) -> EvidenceReport:
    try:
        return await asyncio.to_thread(_summarize, request)
    except EvidenceError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))


@router.post("/stream")
async def stream_evidence(request: ChainRequest = Depends(chain_request)) -> StreamingResponse:
    """
    Same computation, streamed via SSE.

    Events:
      {"type": "status", "message": "..."}
      {"type": "k_row", "k": K, "log_c": ..., "rmse_delta_ess": ...}   (IDR only, one per grid point)
      {"type": "k_undefined", "k": K, "message": "..."}
      {"type": "result", "report": {...}}
      {"type": "done"}
      {"type": "error", "message": "..."}
    """

    async def _pipeline():
        try:
            table = request.table
            yield _status(f"Read {table.T} draws of {len(table.columns)} parameters")
            if "idr" in request.config.methods and request.log_g is not None:
                yield _status("Standardizing the sample...")
                config = request.config
                ctx = await asyncio.to_thread(
                    IdrContext,
                    chain_io.table_sample(table),
                    request.log_g,
                    config.standardization,
                    config.relative_k,
                )
                grid = list(config.k_grid) if config.k_grid else suggest_k_grid(ctx.d, relative_k=config.relative_k)
                for k in grid:
                    try:
                        estimate = await asyncio.to_thread(ctx.estimate, k)
                    except EvidenceError as exc:
                        yield sse({"type": "k_undefined", "k": k, "message": str(exc)})
                        continue
                    yield sse({
                        "type": "k_row",
                        "k": k,
                        "log_c": estimate.log_c,
                        "rmse_delta": estimate.rmse_delta,
                        "rmse_delta_ess": estimate.rmse_delta_ess,
                    })
            yield _status("Computing estimates...")
            report = await asyncio.to_thread(_summarize, request)
            yield sse({"type": "result", "report": report.model_dump(mode="json")})
            yield sse({"type": "done"})
        except EvidenceError as exc:
            logger.warning("evidence stream failed: %s", exc)
            yield sse({"type": "error", "message": str(exc)})
        except Exception as exc:
            logger.exception("evidence stream crashed")
            yield sse({"type": "error", "message": str(exc)})

    return event_stream(_pipeline())


def _status(message: str) -> str:
    return sse({"type": "status", "message": message})
