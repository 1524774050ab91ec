"""
Numerical engine
Encoders, corpus generation, losses, training and evaluation
"""
