"""
Deep factor models - neural cross-sectional factor models with GLS fitting,
Jacobian/Hessian interpretation, probability bounds and rolling backtests.
"""

__version__ = "1.0.0"
