"""Arbitrary-resolution implicit neural image inpainting."""
