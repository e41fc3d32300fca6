"""8-bit quantized detection and tensor-train recurrent classification toolkit."""

__version__ = "0.1.0"
