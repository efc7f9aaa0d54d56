"""Time-efficient progressive GAN + super-resolution training toolkit."""
