"""
Functional cokriging prediction.
"""
