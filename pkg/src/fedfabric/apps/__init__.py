"""Synthetic active-learning applications."""
