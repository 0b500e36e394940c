"""
Potts Markov random field over profile sites.
"""
