"""
Profiles, parameters and the conditional Gaussian machinery of the model.
"""
