"""Tests for the montecarlo module."""
