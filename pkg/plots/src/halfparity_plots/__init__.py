"""Figure rendering for the halfparity simulation's CSV outputs.

This package never recomputes physics: it reads the delimited files the
simulation CLI writes, draws them, and evaluates only the closed-form
overlay expressions those files carry in their metadata lines.
"""

from .figures import FigureSpec, RENDERERS, render
from .overlays import OverlayError, evaluate, overlays
from .tables import Table, TableError, read_table

__version__ = "0.1.0"
