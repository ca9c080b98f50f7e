"""Central jax configuration: everything numeric in this package is float64.

Import this module before any other jax use inside the package.
"""

import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")
