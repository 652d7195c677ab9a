from flexindex.milp_backend.model import (
    BigMRecord, MilpModel, SolveOutcome, SolveStatus, bounds_of, value,
)
from flexindex.milp_backend.base_backend import BaseBackend
from flexindex.milp_backend.pyomo_backend import PyomoBackend
from flexindex.milp_backend.backend_factory import create_backend
from flexindex.milp_backend.encodings import (
    check_truncation, encode_abs, encode_clamp, encode_indicator, encode_max, encode_min, encode_min2,
)

__all__ = [
    'BigMRecord', 'MilpModel', 'SolveOutcome', 'SolveStatus', 'bounds_of', 'value',
    'BaseBackend', 'PyomoBackend', 'create_backend',
    'check_truncation', 'encode_abs', 'encode_clamp', 'encode_indicator', 'encode_max', 'encode_min', 'encode_min2',
]
