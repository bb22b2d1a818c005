"""Age-group classification from single-lead ECG: features, boosted trees, a small CNN,
and the attribution tooling used to explain both."""

__version__ = "0.1.0"
