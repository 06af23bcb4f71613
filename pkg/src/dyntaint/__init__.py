"""Generic dynamic taint analysis with just-in-time fast paths."""

from .engine import EngineConfig, ExecStats, execute
from .isa import parse_program, run_concrete
from .policy import make_policy

__all__ = ["EngineConfig", "ExecStats", "execute", "make_policy", "parse_program", "run_concrete"]
__version__ = "0.1.0"
