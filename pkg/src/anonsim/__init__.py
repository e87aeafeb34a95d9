"""Simulation and checking of anonymous shared-memory protocols.

Step-driven execution of anonymous process automata over symmetric and
asymmetric register memory, a weak shared coin, flag-race binary consensus,
randomized naming, a bounded exhaustive checker, impossibility coupling
harnesses and a batch experiment CLI.
"""

__version__ = "0.1.0"
