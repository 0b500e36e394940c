"""
Synthetic data and the clustering-accuracy study.
"""
