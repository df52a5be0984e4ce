"""Koopman-model moving horizon estimation for quadruped centroidal states.

Modules: ``numerics`` (SVD, pseudo-inverse, eigenvalues, Cholesky),
``centroidal_sim`` (simulator and data files), ``dmdc`` (linear model fit),
``estimators`` (MHE, EKF, Kalman oracle), ``config``, ``harness`` and ``cli``.
"""

__version__ = "0.1.0"
