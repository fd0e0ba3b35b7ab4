"""HTTP surface: POST /style_grad scores a batch, GET /health identifies the
model and protocol. One request at a time per worker; requests are independent."""

import numpy as np
from fastapi import Body, FastAPI, HTTPException

from . import __version__
from .protocol import PROTOCOL_VERSION, ProtocolError, encode_array, validate_request
from .scoring import ClipScorer, FakeScorer


def create_app(scorer) -> FastAPI:
    app = FastAPI(title="clipserve", version=__version__)
    app.state.scorer = scorer

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "protocol": PROTOCOL_VERSION,
            "model": scorer.name,
            "model_hash": scorer.model_hash(),
        }

    @app.post("/style_grad")
    def style_grad(payload: dict = Body(...)):
        try:
            prompt, images = validate_request(payload)
            loss, grads = scorer.style_grad(images, prompt)
        except ProtocolError as exc:
            raise HTTPException(status_code=exc.status, detail=str(exc)) from exc
        if not np.isfinite(loss) or not np.isfinite(grads).all():
            raise HTTPException(status_code=500, detail="scorer produced non-finite values")
        if grads.shape != images.shape:
            raise HTTPException(status_code=500,
                                detail=f"scorer gradient shape {grads.shape} does not "
                                       f"match input {images.shape}")
        return {"loss": loss, "grads": encode_array(grads)}

    return app


def build_scorer(model: str, fake: bool, expected_hash: str | None):
    scorer = FakeScorer() if fake else ClipScorer(model)
    if expected_hash and scorer.model_hash() != expected_hash:
        raise RuntimeError(
            f"model hash mismatch: expected {expected_hash}, "
            f"loaded {scorer.model_hash()}")
    return scorer
