"""ResQ video simulator: residual quantization for convolutional video inference."""
