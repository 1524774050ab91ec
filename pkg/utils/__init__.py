"""
Utility functions for the MIL-NCE toolkit
"""
