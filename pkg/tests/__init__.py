"""Tests for ci-ledger."""
