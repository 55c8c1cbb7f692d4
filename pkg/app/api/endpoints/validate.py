"""Validation endpoint: run IDR against targets with known normalizing constants."""
import asyncio
import logging

import numpy as np
from fastapi import APIRouter, Query
from fastapi.responses import StreamingResponse

from app.api.streaming import event_stream, sse
from app.core.config import settings
from app.services.validation import check_target, default_targets

logger = logging.getLogger(__name__)

router = APIRouter()


@router.get("/")
async def stream_validation(
    draws: int = Query(settings.VALIDATE_DRAWS, ge=100, le=1_000_000),
    seed: int = Query(0, ge=0),
) -> StreamingResponse:
    """
    One event per synthetic target, then a summary.

    Events:
      {"type": "status", "message": "..."}
      {"type": "target", "result": {...}}
      {"type": "result", "passed": N, "failed": N}
      {"type": "done"}
      {"type": "error", "message": "..."}
    """
    targets = default_targets()

    async def _pipeline():
        passed = failed = 0
        try:
            seeds = np.random.SeedSequence(seed).spawn(len(targets))
            for target, child in zip(targets, seeds):
                yield sse({"type": "status", "message": f"Checking {target.name}..."})
                result = await asyncio.to_thread(check_target, target, draws, child)
                passed += result.passed
                failed += not result.passed
                yield sse({"type": "target", "result": result.model_dump(mode="json")})
            yield sse({"type": "result", "passed": passed, "failed": failed})
            yield sse({"type": "done"})
        except Exception as exc:
            logger.exception("validation stream crashed")
            yield sse({"type": "error", "message": str(exc)})

    return event_stream(_pipeline())
