"""Exception types raised across the triage pipeline."""


class ScoutError(Exception):
    """Base class for all pipeline errors."""


# --- ingest ---

class RootNotFound(ScoutError):
    pass


class LedgerCorrupt(ScoutError):
    """Custody ledger fails chain verification; carries the broken sequence number."""

    def __init__(self, seq: int, reason: str):
        super().__init__(f"ledger broken at seq {seq}: {reason}")
        self.seq = seq
        self.reason = reason


# --- pcap ---

class BadMagic(ScoutError):
    pass


class UnsupportedVersion(ScoutError):
    pass


class TruncatedGlobalHeader(ScoutError):
    pass


# --- text extraction ---

class NotMbox(ScoutError):
    pass


class NotZip(ScoutError):
    pass


class CorruptArchive(ScoutError):
    pass


# --- media ---

class UndecodableImage(ScoutError):
    pass


class UnreadableContainer(ScoutError):
    pass


class AsrRejected(ScoutError):
    def __init__(self, status: int, body: str):
        super().__init__(f"ASR endpoint rejected upload: HTTP {status}")
        self.status = status
        self.body = body


class EmptyTranscript(ScoutError):
    pass


# --- gateway ---

class EndpointUnreachable(ScoutError):
    pass


class GatewayTimeout(ScoutError):
    pass


class ModelError(ScoutError):
    """4xx response from the model endpoint; never retried."""

    def __init__(self, status: int, body: str):
        super().__init__(f"model endpoint returned HTTP {status}")
        self.status = status
        self.body = body


class BudgetTooSmall(ScoutError):
    pass
