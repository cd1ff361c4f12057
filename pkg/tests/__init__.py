"""Tests for marketdyn."""
