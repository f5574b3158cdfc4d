"""Memory-budget-aware CNN inference on a simulated SGX-style enclave."""

__version__ = "0.1.0"
