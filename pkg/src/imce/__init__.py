"""In-memory-computing emulation toolkit: graph compiler, INT8 accelerator
kernels, NVM noise injection, board mapping, and a distributed runtime."""

__version__ = "0.1.0"
