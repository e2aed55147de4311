"""dalton: a desk-scale indoor air-quality platform.

Simulated sensor fleet, pub-sub message plane, ingest and persistence,
fleet control with automatic fault recovery, change-point eventing with
cross-device association, and exposure analytics.
"""

__version__ = "0.1.0"
