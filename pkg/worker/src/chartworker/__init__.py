"""chartworker: sandboxed rendering/script worker for the chartforge broker."""

__version__ = "0.1.0"
