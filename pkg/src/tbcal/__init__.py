"""Twin-beam absolute calibration of analog photodetectors.

Simulates correlated photon streams from a down-conversion source, turns them
into sampled photocurrents, and recovers detector quantum efficiency from the
current cross-covariance.
"""

__version__ = "0.1.0"
