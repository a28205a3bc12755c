"""Intent governance engine: proposals are arbitrated, policy-checked,
compiled into bounded contracts, and recorded in a hash-chained log
from which all state is derived."""

__version__ = "0.1.0"
