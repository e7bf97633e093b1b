import time

import numpy as np
import pytest

from ddmkit.audio import AudioBuffer

_SUITE_START = time.monotonic()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.monotonic() - _SUITE_START
    print(f"\nsuite wall time: {elapsed:.1f}s (budget 600s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sine_buffer(freq_hz: float, duration_s: float = 1.0, rate: int = 16000,
                amplitude: float = 0.8) -> AudioBuffer:
    t = np.arange(int(duration_s * rate)) / rate
    return AudioBuffer(samples=amplitude * np.sin(2 * np.pi * freq_hz * t),
                       sample_rate_hz=rate)
