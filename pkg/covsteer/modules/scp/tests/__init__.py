"""Tests for the scp module."""
