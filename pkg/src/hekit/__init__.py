"""Client-aided homomorphic-encryption offload toolkit."""

__version__ = "0.1.0"

from . import ring  # noqa: F401
