"""Figure rendering for quasiflow experiment artifacts."""

from .artifacts import SchemaError
from .figures import KINDS, FigureSpec, RenderResult, render

__version__ = "0.1.0"
