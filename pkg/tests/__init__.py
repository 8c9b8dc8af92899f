"""
    This directory contains unit tests.
    Use `pytest` to run the fast tests and `pytest -m slow` for the desk-scale acceptance runs.
"""
