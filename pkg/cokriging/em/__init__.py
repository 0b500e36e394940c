"""
Monte Carlo EM fitting.
"""
