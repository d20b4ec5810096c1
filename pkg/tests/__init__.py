"""Tests for the skinseg package."""
