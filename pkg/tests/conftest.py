import pytest

from plcfuzz.capture import Direction
from plcfuzz.inference import analyze_captures
from plcfuzz.mockdevice import DeviceConfig
from plcfuzz.mockdevice.recorder import record_capture


def _dump(*rows):
    return bytes.fromhex("".join(rows).replace(" ", ""))


# Hex dumps of the captured IDE <-> PLC exchange, transcribed row by row.
INIT_DUMP = _dump("01 01 00 1a 00 00 00 80", "64 15 00 03 00 0c 49 42", "45 54 48 30 31 4e 30 5f", "4d 00")
RESPONSE_DUMP = _dump("81 01 00 14 00 00 00 01", "00 00 00 00 00 02 00 00", "00 48 00 00")
ACK_DUMP = _dump("01 05 00 16 00 01 00 00", "e8 e9 00 48 00 00 00 1c", "00 04 02 95 00 00")
RESET_DUMP = _dump("01 05 00 16 00 10 00 00", "e8 c8 00 48 00 00 00 00", "00 04 0a ba 00 00")

C2S, S2C = Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT


@pytest.fixture(scope="session")
def captures():
    """One recorded IDE session each against devices issuing tokens 0x48 and 0x7C."""
    return [record_capture(DeviceConfig(token=0x48, vulnerabilities="V1")),
            record_capture(DeviceConfig(token=0x7C, vulnerabilities="V1"), client_port=50000)]


@pytest.fixture(scope="session")
def model(captures):
    return analyze_captures(captures)
