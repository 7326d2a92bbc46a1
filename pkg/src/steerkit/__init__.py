"""Dynamics-guided steering of diffusion policies on a 2D block-touch task."""
