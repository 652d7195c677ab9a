from abc import ABC, abstractmethod
from typing import Optional
import itertools
import os
import threading

from flexindex.logger import get_logger
from flexindex.milp_backend.model import MilpModel, SolveOutcome


class BaseBackend(ABC):
    # LP dump numbering is shared by every backend instance of the process
    _dump_numbers = itertools.count(1)
    _dump_lock = threading.Lock()

    def __init__(self, config):
        self.config = config
        self.logger = get_logger(self.__class__.__name__)

    @abstractmethod
    def available(self) -> bool:
        """Whether the underlying engine can be used."""
        pass

    @abstractmethod
    def solve(self, model: MilpModel, time_limit: Optional[float] = None,
              mip_gap: Optional[float] = None) -> SolveOutcome:
        """Solve the model and load primal values when a solution exists."""
        pass

    def dump_lp(self, model: MilpModel, directory: Optional[str] = None) -> Optional[str]:
        directory = directory or self.config.dump_lp
        if not directory:
            return None
        try:
            os.makedirs(directory, exist_ok=True)
            with BaseBackend._dump_lock:
                number = next(BaseBackend._dump_numbers)
            path = os.path.join(directory, f"{model.name}_{number:05d}.lp")
            model.write_lp(path)
            self.logger.debug('LP written to %s', path)
            return path
        except Exception as e:
            self.logger.error('Error while writing LP file: %s', e)
            raise
