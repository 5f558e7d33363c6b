"""Minimal JSON-over-HTTP transport shared by the detector and annotator clients."""
from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request


class ServiceError(RuntimeError):
    """External service failure. ``retryable`` tells the caller whether an
    identical request may succeed later."""

    def __init__(self, message: str, retryable: bool):
        super().__init__(message)
        self.retryable = retryable


class ProtocolError(ServiceError):
    """The service answered with something that does not follow the wire format."""

    def __init__(self, message: str):
        super().__init__(message, retryable=False)


# auth and quota failures will not fix themselves on retry
FATAL_STATUS = {400, 401, 402, 403, 404, 429}


def post_json(url: str, body: dict, timeout: float) -> dict:
    data = json.dumps(body).encode("utf-8")
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise ServiceError(f"{url}: HTTP {exc.code}", retryable=exc.code not in FATAL_STATUS) from exc
    except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
        raise ServiceError(f"{url}: {exc}", retryable=True) from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"{url}: response is not JSON") from exc
    if not isinstance(payload, dict):
        raise ProtocolError(f"{url}: response is not a JSON object")
    return payload
