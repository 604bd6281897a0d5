"""xri-hub: keeps shared objects coherent across virtual scenes and IoT devices."""

__version__ = "0.1.0"
