"""Desk-scale latent diffusion toolkit: flow matching in token spaces
with dimension-dependent timestep shifting, representation-autoencoder
decoder training, and latent-space best-of-N test-time scaling."""

__version__ = "0.1.0"
