"""
Test suite for ethkg
"""
