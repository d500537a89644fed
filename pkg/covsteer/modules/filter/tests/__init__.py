"""Tests for the filter module."""
