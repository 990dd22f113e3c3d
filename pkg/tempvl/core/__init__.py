# Tensor and gradient-check module
