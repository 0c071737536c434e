"""spanforge: extractive Hindi question answering with full and low-rank fine-tuning on numpy."""
from .errors import (ConfigError, ContractError, DataValidationError, DimensionError, InputError,
                     IntegrityError, NumericError, SpanforgeError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DataValidationError", "DimensionError", "InputError",
           "IntegrityError", "NumericError", "SpanforgeError", "__version__"]
