"""adsim: differentiable quadrotor simulation with online residual-dynamics
learning and rapid policy adaptation."""

__version__ = "0.1.0"
