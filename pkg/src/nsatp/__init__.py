"""Transit arrival-time forecasting with per-window stationarization and
learned recovery of the removed non-stationary structure."""

__version__ = "0.1.0"
