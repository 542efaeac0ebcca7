from __future__ import annotations

from datetime import datetime, timezone

import pytest

from llmmock import MockServer

from scout.timeutils import fixed_clock


@pytest.fixture
def mock_server():
    server = MockServer().start()
    yield server
    server.stop()


@pytest.fixture
def frozen_clock():
    return fixed_clock(datetime(2025, 6, 1, 12, 0, 0, tzinfo=timezone.utc))


def config_text(server: MockServer, *, runs_per_chunk: int = 1,
                extra: str = "") -> str:
    """Workspace config pointing every kind at the mock endpoints."""
    kinds = ["pcap", "mbox", "eml", "docx", "html", "plaintext", "audio"]
    lines = [
        "case.id = CASE-TEST",
        "case.background = Exercise corpus for pipeline tests.",
        "case.keywords = slashdot, enron",
        f"runs_per_chunk = {runs_per_chunk}",
        "gateway.max_concurrent = 2",
        "gateway.backoff_base_s = 0.01",
        f"profile.default.endpoint_url = {server.chat_url}",
        "profile.default.model_id = mock-text",
        "profile.default.modality = text",
        "profile.default.timeout_s = 10",
        "profile.default.max_retries = 1",
        f"profile.vision.endpoint_url = {server.chat_url}",
        "profile.vision.model_id = mock-vision",
        "profile.vision.modality = vision",
        "profile.vision.timeout_s = 10",
        "profile.vision.max_retries = 1",
        f"asr.endpoint_url = {server.asr_url}",
        "asr.model = mock-whisper",
    ]
    lines += [f"models.{kind} = default" for kind in kinds]
    lines += ["models.image = vision", "models.video = vision"]
    if extra:
        lines.append(extra)
    return "\n".join(lines) + "\n"
