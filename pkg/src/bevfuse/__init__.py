"""Desk-scale camera-lidar BEV fusion sandbox.

Everything runs on a from-scratch float64 reverse-mode tensor engine; the
interesting moving parts are the three camera-to-BEV projection variants
(depth-weighted lift-splat, uniform lift-splat, and per-column cross-attention
onto the projected horizon), depth supervision, temporal BEV aggregation, and
test-time-augmented weighted box fusion, all exercised on synthetic scenes.
"""

from .tensor import Parameter, Tensor, grad_check

__all__ = ["Tensor", "Parameter", "grad_check"]
