"""Evolution strategies with a shared noise table and scalar-only communication."""

__version__ = "0.1.0"
PROTO_VERSION = 1
