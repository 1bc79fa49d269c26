"""Slotted simulator for entanglement distribution in quantum repeater networks.

Links generate EPR pairs stochastically, pairs live in node memories for a
bounded number of slots, swapping fuses pairs into longer segments, and a
routing pass serves source-destination requests over whatever is alive.
Link generation and proactive swapping can each be driven by a small
deep-Q agent trained online.
"""

from qroute.errors import ConfigError, ContractError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "__version__"]
