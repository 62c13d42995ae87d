"""Layer-wise teacher-student network compression with exact cost accounting."""

__version__ = "0.1.0"
