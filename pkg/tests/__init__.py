"""Tests for joker."""
