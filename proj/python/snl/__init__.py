"""Nonlocal and spectral nonlocal blocks (C++ core)."""

from ._snl import *  # noqa: F401,F403
from ._snl import __doc__  # noqa: F401
