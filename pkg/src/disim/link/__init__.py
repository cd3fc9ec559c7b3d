"""Wire protocol, impaired channels, node loops and the telemetry endpoint."""

from .channel import Channel, ChannelModel
from .protocol import (
    KIND_HEARTBEAT,
    KIND_JOINT_STATE,
    KIND_TORQUE_CMD,
    BadMagic,
    BadVersion,
    ChecksumMismatch,
    Frame,
    ProtocolError,
    Truncated,
    decode,
    encode,
)
from .session import (
    ReplayError,
    Session,
    SessionConfig,
    SessionResult,
    replay_events,
    run_nodes,
)
from .telemetry import DEFAULT_PORT, TelemetryServer

__all__ = [
    "Channel", "ChannelModel", "Frame", "ProtocolError", "BadMagic", "BadVersion",
    "ChecksumMismatch", "Truncated", "decode", "encode", "KIND_JOINT_STATE",
    "KIND_TORQUE_CMD", "KIND_HEARTBEAT", "Session", "SessionConfig", "SessionResult",
    "ReplayError", "replay_events", "run_nodes", "TelemetryServer", "DEFAULT_PORT",
]
