"""Scout: read-only digital evidence triage with local language-model endpoints."""

__version__ = "0.1.0"

TOOL_ACTOR = f"scout/{__version__}"
