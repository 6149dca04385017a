"""Central JAX import point.

Everything numerical that needs autodiff goes through this module so the
float64 switch is flipped before any jax.numpy array is created.
"""

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp"]
