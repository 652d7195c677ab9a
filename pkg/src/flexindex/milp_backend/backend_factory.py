from typing import Dict, Type

from flexindex.errors import ConfigError
from flexindex.milp_backend.base_backend import BaseBackend
from flexindex.milp_backend.pyomo_backend import PyomoBackend

BACKENDS: Dict[str, Type[BaseBackend]] = {
    'pyomo': PyomoBackend,
}


def create_backend(config) -> BaseBackend:
    """Instantiate the backend named in the configuration."""
    try:
        backend_class = BACKENDS[config.backend]
    except KeyError:
        raise ConfigError(f"Unknown MILP backend: {config.backend}")
    return backend_class(config)
