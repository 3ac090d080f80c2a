"""Mock PLC target speaking the captured IDE protocol, with seedable flaws."""

from .protocol import (ACK_REQUEST, INIT_REQUEST, INIT_RESPONSE, RESET_REQUEST, DeviceConfig, DeviceCore,
                       DeviceState, Phase, Vulnerability, parse_vulnerabilities)
from .recorder import record_capture, record_session
from .server import MockDeviceServer

__all__ = [
    "ACK_REQUEST", "INIT_REQUEST", "INIT_RESPONSE", "RESET_REQUEST", "DeviceConfig", "DeviceCore",
    "DeviceState", "MockDeviceServer", "Phase", "Vulnerability", "parse_vulnerabilities",
    "record_capture", "record_session",
]
