"""Workspace configuration: a flat key-value document with dotted keys.

Example::

    case.id = CASE-042
    case.background = Suspected data exfiltration via DNS.
    case.keywords = slashdot, exfiltration
    runs_per_chunk = 1

    profile.default.endpoint_url = http://127.0.0.1:8080/v1/chat/completions
    profile.default.model_id = hermes-3
    profile.default.modality = text
    profile.vision.endpoint_url = http://127.0.0.1:8080/v1/chat/completions
    profile.vision.model_id = qwen2-vl
    profile.vision.modality = vision

    models.pcap = default
    models.mbox = default
    models.image = vision

Values are parsed as JSON when they look like JSON, otherwise as strings;
comma-separated strings serve as lists. Flags on the CLI override the file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .extract_media import DEFAULT_IMAGE_MAX_DIM, DEFAULT_VIDEO_MAX_DURATION_S
from .extract_text import DEFAULT_SUSPICIOUS_AUTHORS, RULES, RuleConfig
from .gateway import ModelProfile
from .ingest import EvidenceKind
from .triage import CaseContext

_PROFILE_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")

_KIND_KEYS = {kind.value.lower(): kind for kind in EvidenceKind}


@dataclass(frozen=True)
class ScoutConfig:
    case: CaseContext
    profiles: dict[str, ModelProfile] = field(default_factory=dict)
    kind_models: dict[str, tuple[str, ...]] = field(default_factory=dict)
    default_models: tuple[str, ...] = ()
    runs_per_chunk: int = 1
    max_concurrent: int = 2
    backoff_base_s: float = 1.0
    rules: RuleConfig = field(default_factory=RuleConfig)
    image_max_dim: int = DEFAULT_IMAGE_MAX_DIM
    video_max_duration_s: float = DEFAULT_VIDEO_MAX_DURATION_S
    asr_endpoint_url: str | None = None
    asr_model: str = "whisper-1"

    def profiles_for_kind(self, kind: EvidenceKind) -> list[ModelProfile]:
        names = self.kind_models.get(kind.value.lower(), self.default_models)
        return [self.profiles[name] for name in names]

    def restricted_to(self, names: list[str]) -> "ScoutConfig":
        """Keep only the named profiles (CLI --models override)."""
        unknown = [n for n in names if n not in self.profiles]
        if unknown:
            raise ValueError(f"unknown profile(s): {', '.join(unknown)}")
        keep = tuple(names)
        kind_models = {
            kind: tuple(n for n in model_names if n in keep) or keep
            for kind, model_names in self.kind_models.items()
        }
        return replace(self, kind_models=kind_models, default_models=keep)


def parse_config(text: str) -> ScoutConfig:
    values = _parse_pairs(text)

    profiles = _build_profiles(values)
    kind_models: dict[str, tuple[str, ...]] = {}
    default_models: tuple[str, ...] = ()
    for key, value in values.items():
        if not key.startswith("models."):
            continue
        target = key.split(".", 1)[1]
        names = tuple(_as_list(value))
        for name in names:
            if name not in profiles:
                raise ValueError(f"{key}: unknown profile {name!r}")
        if target == "default":
            default_models = names
        elif target in _KIND_KEYS:
            kind_models[target] = names
        else:
            raise ValueError(f"unknown evidence kind in config key {key!r}")

    enabled = values.get("rules.enabled")
    enabled_ids = frozenset(_as_list(enabled)) if enabled is not None else frozenset(RULES)
    unknown_rules = enabled_ids - set(RULES)
    if unknown_rules:
        raise ValueError(f"rules.enabled: unknown rule ids {sorted(unknown_rules)}")
    rules = RuleConfig(
        suspicious_authors=tuple(
            _as_list(values.get("rules.suspicious_authors",
                                list(DEFAULT_SUSPICIOUS_AUTHORS)))),
        enabled=enabled_ids,
    )

    case = CaseContext(
        case_id=str(values.get("case.id", "UNSPECIFIED")),
        background=str(values.get("case.background", "")),
        keywords=tuple(_as_list(values.get("case.keywords", []))),
        extra_instructions=(
            str(values["case.extra_instructions"])
            if "case.extra_instructions" in values else None),
    )

    return ScoutConfig(
        case=case,
        profiles=profiles,
        kind_models=kind_models,
        default_models=default_models,
        runs_per_chunk=int(values.get("runs_per_chunk", 1)),
        max_concurrent=int(values.get("gateway.max_concurrent", 2)),
        backoff_base_s=float(values.get("gateway.backoff_base_s", 1.0)),
        rules=rules,
        image_max_dim=int(values.get("media.image_max_dim", DEFAULT_IMAGE_MAX_DIM)),
        video_max_duration_s=float(
            values.get("media.video_max_duration_s", DEFAULT_VIDEO_MAX_DURATION_S)),
        asr_endpoint_url=(str(values["asr.endpoint_url"])
                          if "asr.endpoint_url" in values else None),
        asr_model=str(values.get("asr.model", "whisper-1")),
    )


def load_config(path: Path | str) -> ScoutConfig:
    path = Path(path)
    if not path.exists():
        return parse_config("")
    return parse_config(path.read_text(encoding="utf-8"))


def _parse_pairs(text: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = _parse_value(value.strip())
    return values


def _parse_value(value: str):
    if value and value[0] in "[{\"0123456789-" or value in ("true", "false", "null"):
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            pass
    return value


def _as_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, list):
        return [str(v).strip() for v in value if str(v).strip()]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _build_profiles(values: dict) -> dict[str, ModelProfile]:
    grouped: dict[str, dict] = {}
    for key, value in values.items():
        if not key.startswith("profile."):
            continue
        parts = key.split(".")
        if len(parts) != 3:
            raise ValueError(f"malformed profile key {key!r}")
        _, name, attr = parts
        if not _PROFILE_NAME_RE.match(name):
            raise ValueError(f"profile name {name!r} must match [A-Za-z0-9_-]+")
        grouped.setdefault(name, {})[attr] = value

    profiles = {}
    for name, attrs in grouped.items():
        known = {"endpoint_url", "model_id", "modality", "max_context_tokens",
                 "temperature", "timeout_s", "max_retries", "video_native"}
        unknown = set(attrs) - known
        if unknown:
            raise ValueError(f"profile.{name}: unknown keys {sorted(unknown)}")
        if "endpoint_url" not in attrs or "model_id" not in attrs:
            raise ValueError(f"profile.{name}: endpoint_url and model_id are required")
        kwargs = {
            "name": name,
            "endpoint_url": str(attrs["endpoint_url"]),
            "model_id": str(attrs["model_id"]),
        }
        if "modality" in attrs:
            kwargs["modality"] = str(attrs["modality"])
        if "max_context_tokens" in attrs:
            kwargs["max_context_tokens"] = int(attrs["max_context_tokens"])
        if "temperature" in attrs:
            kwargs["temperature"] = float(attrs["temperature"])
        if "timeout_s" in attrs:
            kwargs["timeout_s"] = int(attrs["timeout_s"])
        if "max_retries" in attrs:
            kwargs["max_retries"] = int(attrs["max_retries"])
        if "video_native" in attrs:
            kwargs["video_native"] = _as_bool(attrs["video_native"])
        profiles[name] = ModelProfile(**kwargs)
    return profiles


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")
