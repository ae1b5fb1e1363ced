"""Hierarchical RL with a learned state partition, option workers and a tabular SMDP manager."""

__version__ = "0.1.0"
