from . import schemas
from .core import Planner, run_sweep
from .utility import register_utility
