"""Exception types shared across the package.

Every failure mode that callers are expected to branch on gets its own class;
generic misuse keeps plain ValueError/TypeError.
"""


class TextureKitError(Exception):
    """Base class for all package-specific errors."""


class GridFormatError(TextureKitError):
    """Malformed raster/tensor container, or unsupported shape/channel count."""


class DegenerateHistogramError(TextureKitError):
    """Score map has fewer than two distinct values; no threshold exists."""


class RegionMiningError(TextureKitError):
    """Pair mining cannot proceed (e.g. fewer than two regions)."""


class TrainingDivergedError(TextureKitError):
    """Contrastive training produced a non-finite loss.

    Carries the last finite parameter snapshot so callers can salvage it.
    """

    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


class SamplerError(TextureKitError):
    """Non-finite state inside an ODE solve; message names the failing step."""


class NoExemplarSupportError(TextureKitError):
    """A requested label never occurs in any exemplar label map."""


class BridgeTransportError(TextureKitError):
    """Remote denoiser endpoint unreachable, timed out, or spoke garbage."""


class BridgeConnectionError(BridgeTransportError):
    """Endpoint refused, reset, or closed the connection mid-exchange."""


class BridgeTimeoutError(BridgeTransportError):
    """Endpoint accepted the request but never finished answering."""


class BridgeProtocolError(BridgeTransportError):
    """Frame violates the wire format (bad magic, type, or truncation)."""


class BridgeShapeError(BridgeTransportError):
    """Response tensor shape differs from the request's.

    Carries both shapes so callers can log the disagreement precisely.
    """

    def __init__(self, sent_shape, received_shape):
        super().__init__(
            f"response shape {tuple(received_shape)} does not match "
            f"request shape {tuple(sent_shape)}"
        )
        self.sent_shape = tuple(sent_shape)
        self.received_shape = tuple(received_shape)


class BridgeRemoteError(BridgeTransportError):
    """The remote endpoint reported a failure while evaluating the request."""


class TrajectoryMissingError(TextureKitError):
    """Edit requested for an image with no stored trajectory; invert first."""


class PlanError(TextureKitError):
    """Window plan constraints are unsatisfiable for the given field size."""


class ProjectError(TextureKitError):
    """Project store is missing, locked, or in a state the stage cannot use."""

    def __init__(self, message, missing_prerequisite=None):
        super().__init__(message)
        self.missing_prerequisite = missing_prerequisite


class StageBusyError(ProjectError):
    """Another job is already queued or running for the same project."""


class LabelMatchError(TextureKitError):
    """Predicted/truth class counts cannot be reconciled by matching."""


class ClusterError(TextureKitError):
    """Clustering input is unusable (too few points, bad shape)."""
