"""JSON-over-HTTP calls to the inference services."""

import logging
import time
from typing import Callable

import requests
from pydantic import BaseModel, ValidationError

from visual_wsd.errors import ResponseIntegrityError, RetryableProviderError


def post_json[T: BaseModel](
    session: requests.Session,
    url: str,
    body: BaseModel,
    response_model: type[T],
    retries: int = 3,
    backoff: float = 0.5,
    timeout: float = 30.0,
    on_attempt: Callable[[], None] | None = None,
) -> T:
    """POST `body` and validate the answer as `response_model`.

    Transport errors and non-200 answers are retried up to `retries` attempts,
    sleeping `backoff * 2 ** (attempt - 1)` seconds in between. A 200 answer that
    does not validate is not retried.
    """
    last_error = ""
    for attempt in range(1, retries + 1):
        if on_attempt is not None:
            on_attempt()
        try:
            response = session.post(url, json=body.model_dump(), timeout=timeout)
            if response.status_code == 200:
                return response_model.model_validate(response.json())
            last_error = f"HTTP {response.status_code} from {url}"
        except requests.RequestException as e:
            last_error = f"{type(e).__name__} talking to {url}: {e}"
        except ValidationError as e:
            raise ResponseIntegrityError(f"Malformed response from {url}: {e}") from e
        logging.warning(
            f"Request to {url} failed (attempt {attempt}/{retries}): {last_error}"
        )
        if attempt < retries and backoff > 0:
            time.sleep(backoff * 2 ** (attempt - 1))
    raise RetryableProviderError(last_error, attempts=retries)
