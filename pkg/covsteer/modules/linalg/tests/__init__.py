"""Tests for the linalg module."""
