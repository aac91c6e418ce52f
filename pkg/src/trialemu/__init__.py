"""Trial-emulation causal inference toolkit.

Converts timestamped patient event streams into a trial-emulating
observational cohort and estimates the average treatment effect with six
estimators under a bootstrap evaluation protocol.
"""

__version__ = "0.1.0"
