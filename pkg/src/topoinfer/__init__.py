"""Passive topology inference from packet timing meta-data."""
