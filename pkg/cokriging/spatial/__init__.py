"""
Space-time covariance kernels and sparse Gaussian-process numerics.
"""
