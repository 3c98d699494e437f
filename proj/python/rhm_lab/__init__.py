"""Python interface to the RHM lab C++ core."""

from ._core import *  # noqa: F401,F403
