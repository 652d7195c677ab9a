from dataclasses import dataclass, fields, replace
from typing import Optional
import math

import yaml

from flexindex.errors import ConfigError
from flexindex.logger import get_logger

logger = get_logger('params')


def load_params(params_path: str) -> dict:
    """Load parameters from a YAML file."""
    try:
        with open(params_path, 'r') as file:
            params = yaml.safe_load(file)
        logger.debug('Parameters retrieved from %s', params_path)
        return params or {}
    except FileNotFoundError:
        logger.error('File not found: %s', params_path)
        raise
    except yaml.YAMLError as e:
        logger.error('YAML error: %s', e)
        raise
    except Exception as e:
        logger.error('Unexpected error: %s', e)
        raise


def load_config(config_path: str) -> dict:
    """Load configuration from yaml file."""
    return load_params(config_path)


@dataclass(frozen=True)
class Config:
    """Algorithm and backend settings for one flexibility run."""
    alpha_prime: float = 0.5
    rel_tol: float = 0.05
    eps_r0: float = 0.05
    r_r: float = 2.0
    aux_tol: float = 0.025
    aux_eps0: float = 0.005
    aux_eps_floor: float = 1e-6
    wc_tol: float = 1e-4
    time_limit: float = 600.0
    max_iterations: int = 200
    use_transformation: bool = True
    use_dropping: bool = True
    use_auxiliary: bool = True
    keep_transformed: bool = False
    single_thread: bool = False
    seed: int = 0
    solver: str = 'appsi_highs'
    backend: str = 'pyomo'
    mip_gap: float = 1e-6
    feasibility_tol: float = 1e-6
    integrality_tol: float = 1e-6
    integrality_focus: bool = False
    threads: int = 1
    dump_lp: Optional[str] = None
    angle_bound: float = 2 * math.pi * 4
    host_max: float = 1e4

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ConfigError(f"rel_tol must be positive, got {self.rel_tol}")
        if not self.r_r > 1:
            raise ConfigError(f"r_r must exceed 1, got {self.r_r}")
        if not self.eps_r0 > 0:
            raise ConfigError(f"eps_r0 must be positive, got {self.eps_r0}")
        if not self.alpha_prime > 0:
            raise ConfigError(f"alpha_prime must be positive, got {self.alpha_prime}")
        if not self.aux_eps0 > 0 or not self.aux_tol > 0:
            raise ConfigError("aux_eps0 and aux_tol must be positive")

    def with_overrides(self, **overrides) -> 'Config':
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def solver_config_from(params: Optional[dict] = None, config: Optional[dict] = None,
                       overrides: Optional[dict] = None) -> Config:
    """
    Merge stage params, config.yaml sections and CLI overrides into a Config.

    :param params: the 'solve' section of params.yaml
    :param config: the parsed config.yaml
    :param overrides: CLI values; None entries are ignored
    :return: validated Config
    """
    try:
        known = {f.name for f in fields(Config)}
        merged = {}
        config = config or {}
        backend = config.get('backend', {})
        merged.update({
            'backend': backend.get('name'),
            'solver': backend.get('solver'),
            'mip_gap': backend.get('mip_gap'),
            'feasibility_tol': backend.get('feasibility_tol'),
            'integrality_tol': backend.get('integrality_tol'),
            'integrality_focus': backend.get('integrality_focus'),
            'threads': backend.get('threads'),
            'seed': backend.get('seed'),
            'dump_lp': backend.get('dump_lp'),
            'alpha_prime': config.get('region', {}).get('alpha_prime'),
            'host_max': config.get('region', {}).get('host_max'),
            'angle_bound': config.get('formulation', {}).get('angle_bound'),
        })
        merged.update(params or {})
        merged.update(overrides or {})
        unknown = set(merged) - known
        if unknown:
            logger.debug('Ignoring non-solver keys: %s', sorted(unknown))
        values = {k: v for k, v in merged.items() if k in known and v is not None}
        cfg = Config(**values)
        logger.debug('Solver configuration assembled: %s', cfg)
        return cfg
    except Exception as e:
        logger.error('Invalid solver configuration: %s', e)
        raise
