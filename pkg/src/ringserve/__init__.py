"""Emulated CPU-free LLM serving: a device-resident scheduler and a frontend sharing one ring buffer."""

from .config import Config, load_config
from .ring_buffer import RingBuffer, SlotState
from .scheduler import DeviceScheduler, Mode
from .system import System, build_system

__version__ = "0.1.0"

__all__ = ["Config", "DeviceScheduler", "Mode", "RingBuffer", "SlotState", "System", "build_system",
           "load_config"]
