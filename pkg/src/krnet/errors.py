class ValidationError(ValueError):
    """Raised when inputs, configs or files violate a documented contract."""
