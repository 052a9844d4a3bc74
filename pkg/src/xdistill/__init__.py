"""Cross distillation for few-shot network compression.

Layer-wise teacher/student regression with cross connections, proximal
pruning/quantization, and numerical verification of the associated
error-propagation bounds.
"""

__version__ = "0.1.0"
