"""Core attack, testbed and evaluation modules for stagedpgd."""
