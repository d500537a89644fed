"""Tests for the augmented module."""
