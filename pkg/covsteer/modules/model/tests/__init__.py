"""Tests for the model module."""
