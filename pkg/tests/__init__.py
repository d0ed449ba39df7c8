"""Tests for prompt-bandit."""
