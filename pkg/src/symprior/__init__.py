"""Symbolic regression over multi-branch expression trees guided by corpus priors."""

import logging
import os

__version__ = "0.1.0"

_level = os.environ.get("SYMPRIOR_LOG")
if _level:
    logging.basicConfig(level=_level.upper(), format="%(levelname)s %(name)s: %(message)s")
