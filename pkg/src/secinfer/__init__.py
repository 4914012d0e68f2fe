"""Secure serverless model inference: key broker, enclave runtime, request
router and a discrete-event platform simulator."""

__version__ = "0.1.0"
