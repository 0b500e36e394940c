"""
Profile cokriging: spatio-temporal functional mixture regression and prediction.
"""

__version__ = "0.1.0"
