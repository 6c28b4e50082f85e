"""Radiance fields stored as low-rank factorized tensors, with hand-written gradients."""
