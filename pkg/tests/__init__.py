"""Tests for the qubit monitor."""
