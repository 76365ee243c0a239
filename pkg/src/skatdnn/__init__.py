"""SKA-TDNN: selective kernel attention speaker embeddings on a small numpy autodiff core."""
from .errors import ConfigurationError, ContractError, NumericError
from .network import NetworkConfig, build

__all__ = ["ConfigurationError", "ContractError", "NumericError", "NetworkConfig", "build"]
__version__ = "0.1.0"
