"""Tests for the medformer package."""
