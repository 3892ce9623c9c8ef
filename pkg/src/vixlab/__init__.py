"""Index and VIX-futures toolkit: CBOE-style VIX from option chains, SDE
simulation and the consistency checks linking an index model to a VIX
futures term structure."""

__version__ = "0.1.0"
