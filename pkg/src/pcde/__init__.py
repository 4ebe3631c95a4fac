"""Partition-based conditional density estimation."""
