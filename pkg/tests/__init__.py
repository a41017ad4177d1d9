"""Tests for sam-peft."""
