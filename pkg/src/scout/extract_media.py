"""Audio, image and video preparation for multimodal model consumption.

Speech recognition is always a remote endpoint (a local inference server
speaking the de-facto multipart transcription contract); images are downscaled
in-process; video containers are validated and packaged by reference, split
into logical time segments when they exceed the per-request duration cap.
"""

from __future__ import annotations

import base64
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import requests
from PIL import Image, UnidentifiedImageError

from .errors import (
    AsrRejected,
    EmptyTranscript,
    EndpointUnreachable,
    UndecodableImage,
    UnreadableContainer,
)

log = logging.getLogger(__name__)

# Current multimodal endpoints handle roughly 20-minute videos per request;
# 25 minutes leaves margin and is configurable per profile.
DEFAULT_VIDEO_MAX_DURATION_S = 1500.0
DEFAULT_IMAGE_MAX_DIM = 1024

_PIL_MIME = {"JPEG": "image/jpeg", "PNG": "image/png", "GIF": "image/gif"}


@dataclass(frozen=True)
class MediaAttachment:
    media_kind: str            # "image" | "video"
    mime: str
    payload_b64: str | None = None   # inline payload (images)
    file_ref: str | None = None      # path reference (video)
    width: int | None = None
    height: int | None = None
    duration_s: float | None = None
    downscaled: bool = False
    segment: tuple[float, float] | None = None  # [start, end) seconds


@dataclass(frozen=True)
class TranscriptSegment:
    start_s: float
    end_s: float
    text: str


@dataclass(frozen=True)
class Transcript:
    text: str
    language: str | None
    segments: tuple[TranscriptSegment, ...]
    asr_model: str


def transcribe_audio(path: Path | str, endpoint_url: str, model: str,
                     timeout_s: int = 300) -> Transcript:
    """Upload an audio file to the transcription endpoint.

    The wire contract is a multipart POST with fields `file` and `model` and a
    JSON response carrying at least {"text": ...}. The transcript is handed to
    the ordinary text analysis path downstream.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            resp = requests.post(
                endpoint_url,
                files={"file": (path.name, fh, "application/octet-stream")},
                data={"model": model},
                timeout=timeout_s,
            )
    except requests.RequestException as exc:
        raise EndpointUnreachable(f"ASR endpoint {endpoint_url}: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise AsrRejected(resp.status_code, resp.text[:2000])
    try:
        payload = resp.json()
        text = payload["text"]
    except (ValueError, KeyError, TypeError) as exc:
        raise AsrRejected(resp.status_code, f"malformed ASR response: {exc}") from exc
    if not isinstance(text, str) or not text.strip():
        raise EmptyTranscript(str(path))
    return Transcript(
        text=text,
        language=payload.get("language"),
        segments=_parse_segments(payload.get("segments")),
        asr_model=model,
    )


def _parse_segments(raw) -> tuple[TranscriptSegment, ...]:
    if not isinstance(raw, list):
        return ()
    segments = []
    for entry in raw:
        try:
            segments.append(TranscriptSegment(
                start_s=float(entry["start"]),
                end_s=float(entry["end"]),
                text=str(entry.get("text", "")),
            ))
        except (TypeError, KeyError, ValueError):
            return ()
    segments.sort(key=lambda s: s.start_s)
    for prev, cur in zip(segments, segments[1:]):
        if cur.start_s < prev.end_s:
            return ()  # overlapping timings: keep the text, drop the timeline
    return tuple(segments)


def prepare_image(path: Path | str, max_dim: int = DEFAULT_IMAGE_MAX_DIM) -> MediaAttachment:
    """Package an image for transport, downscaling when it exceeds max_dim.

    Under-cap images pass through byte-identical, which also makes
    preparation idempotent.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        with Image.open(io.BytesIO(raw)) as img:
            fmt = img.format or ""
            width, height = img.size
            mime = _PIL_MIME.get(fmt)
            if mime is None:
                raise UndecodableImage(f"unsupported image format {fmt!r}: {path}")
            if max(width, height) <= max_dim:
                return MediaAttachment(
                    media_kind="image", mime=mime,
                    payload_b64=base64.b64encode(raw).decode("ascii"),
                    width=width, height=height, downscaled=False,
                )
            if width >= height:
                new_w = max_dim
                new_h = max(1, round(height * max_dim / width))
            else:
                new_h = max_dim
                new_w = max(1, round(width * max_dim / height))
            img.seek(0)  # GIF: first frame only
            resized = img.resize((new_w, new_h), resample=Image.BOX)
            if fmt == "JPEG" and resized.mode not in ("RGB", "L"):
                resized = resized.convert("RGB")
            buf = io.BytesIO()
            resized.save(buf, format=fmt)
    except UndecodableImage:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from exc
    return MediaAttachment(
        media_kind="image", mime=mime,
        payload_b64=base64.b64encode(buf.getvalue()).decode("ascii"),
        width=new_w, height=new_h, downscaled=True,
    )


def prepare_video(path: Path | str,
                  max_duration_s: float = DEFAULT_VIDEO_MAX_DURATION_S) -> list[MediaAttachment]:
    """Validate an ftyp-signed container and package it by reference.

    Videos longer than the cap become sequential [start, end) segments, each
    destined for its own model request; verdicts aggregate back to the parent
    evidence item.
    """
    path = Path(path)
    duration = video_duration_s(path)
    if duration <= max_duration_s:
        return [MediaAttachment(
            media_kind="video", mime="video/mp4", file_ref=str(path),
            duration_s=duration,
        )]
    attachments = []
    start = 0.0
    while start < duration:
        end = min(start + max_duration_s, duration)
        attachments.append(MediaAttachment(
            media_kind="video", mime="video/mp4", file_ref=str(path),
            duration_s=end - start, segment=(start, end),
        ))
        start = end
    return attachments


def video_duration_s(path: Path | str) -> float:
    """Read the presentation duration from the container's movie header."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise UnreadableContainer(f"{path}: {exc}") from exc
    moov = _find_box(data, 0, len(data), b"moov")
    if moov is None:
        raise UnreadableContainer(f"{path}: no moov box")
    mvhd = _find_box(data, moov[0], moov[1], b"mvhd")
    if mvhd is None:
        raise UnreadableContainer(f"{path}: no mvhd box")
    body = data[mvhd[0]:mvhd[1]]
    try:
        version = body[0]
        if version == 1:
            timescale, duration = struct.unpack(">IQ", body[20:32])
        else:
            timescale, duration = struct.unpack(">II", body[12:20])
    except (IndexError, struct.error) as exc:
        raise UnreadableContainer(f"{path}: bad mvhd box") from exc
    if timescale == 0:
        raise UnreadableContainer(f"{path}: zero timescale")
    return duration / timescale


def _find_box(data: bytes, start: int, end: int, name: bytes) -> tuple[int, int] | None:
    """Scan sibling boxes in data[start:end]; return the body span of `name`."""
    offset = start
    while offset + 8 <= end:
        size = struct.unpack(">I", data[offset:offset + 4])[0]
        box_type = data[offset + 4:offset + 8]
        header = 8
        if size == 1:
            if offset + 16 > end:
                return None
            size = struct.unpack(">Q", data[offset + 8:offset + 16])[0]
            header = 16
        elif size == 0:
            size = end - offset
        if size < header or offset + size > end:
            return None
        if box_type == name:
            return offset + header, offset + size
        offset += size
    return None


def sample_frames(path: Path | str, every_s: float = 2.0,
                  max_frames: int = 64) -> list[bytes]:
    """Uniformly sample JPEG frames for endpoints without native video input."""
    try:
        import cv2
    except ImportError as exc:
        raise UnreadableContainer(
            "frame sampling requires opencv (install the 'video' extra)") from exc
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise UnreadableContainer(f"{path}: container not decodable")
    fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
    step = max(1, round(fps * every_s)) if fps > 0 else 1
    frames: list[bytes] = []
    index = 0
    try:
        while len(frames) < max_frames:
            grabbed = cap.grab()
            if not grabbed:
                break
            if index % step == 0:
                ok, frame = cap.retrieve()
                if ok:
                    encoded_ok, encoded = cv2.imencode(".jpg", frame)
                    if encoded_ok:
                        frames.append(encoded.tobytes())
            index += 1
    finally:
        cap.release()
    if not frames:
        raise UnreadableContainer(f"{path}: no decodable frames")
    return frames
