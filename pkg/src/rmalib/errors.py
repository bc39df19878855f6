"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so callers (and the
CLI) can distinguish failure classes without matching on message text.
"""


class RMAError(Exception):
    code = "rma-error"


# memory handle blob decoding


class MemhandleDecodeError(RMAError):
    code = "memhandle-decode"


class BadMagic(MemhandleDecodeError):
    code = "bad-magic"


class BadVersion(MemhandleDecodeError):
    code = "bad-version"


class Truncated(MemhandleDecodeError):
    code = "truncated"


class InvalidOpsString(RMAError):
    code = "invalid-ops-string"

    def __init__(self, token):
        super().__init__(f"unknown operation {token!r} in ops string")
        self.token = token


class InvalidInfoValue(RMAError):
    code = "invalid-value"


class InvalidArgument(RMAError, ValueError):
    code = "invalid-argument"


# transport level


class OutOfArena(RMAError):
    code = "out-of-arena"


class StaleRkey(RMAError):
    code = "stale-rkey"


class AlreadyReleased(RMAError):
    code = "already-released"


class ClosedEndpoint(RMAError):
    code = "closed-endpoint"


class PayloadTooLarge(RMAError):
    code = "payload-too-large"


class UnattachedMemory(RMAError):
    """Target-side address resolution found no exposed region."""

    code = "unattached-memory"


class SimDeadlock(RMAError):
    code = "deadlock"


class ContextMismatch(RMAError):
    code = "context-mismatch"


# window / RMA API level


class EpochError(RMAError):
    code = "epoch-error"


class NoEpoch(EpochError):
    code = "no-epoch"


class OpenEpoch(EpochError):
    code = "open-epoch"


class OutOfRange(RMAError):
    code = "out-of-range"


class InvalidTarget(RMAError):
    code = "invalid-target"


class UnsupportedOperation(RMAError):
    code = "unsupported-operation"


class AssertionViolation(RMAError):
    code = "assertion-violation"


class InvalidHandle(RMAError):
    code = "invalid-handle"


class OutstandingRequests(RMAError):
    code = "outstanding-request"


class UnknownBase(RMAError):
    code = "unknown-base"


class AttachOverlap(RMAError):
    code = "attach-overlap"


class MismatchedGroup(RMAError):
    code = "mismatched-group"


class OracleFailure(RMAError):
    """A benchmark's final memory state disagrees with its sequential oracle."""

    code = "oracle-failure"
