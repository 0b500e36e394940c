"""
Cubic B-spline bases along pressure.
"""
