"""Spectrum trading between virtual optical networks on an elastic optical network."""
