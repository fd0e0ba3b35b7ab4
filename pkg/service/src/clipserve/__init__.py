"""Scoring service: hosts an image-text model behind a small JSON protocol,
returning a semantic loss and its exact gradient w.r.t. the submitted pixels."""

__version__ = "0.1.0"
